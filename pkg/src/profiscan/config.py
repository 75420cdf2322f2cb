"""Run configuration: one YAML document with nested sections.

Unknown keys and wrong types are rejected with the dotted name of the
offending field.  See ``README.md`` for the full schema.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union, get_args, get_origin

import yaml

from .env import ActionBounds, EpisodeDefaults
from .mesh import load_mesh, make_test_piece, make_training_piece
from .policy import PpoConfig
from .sensor import SensorSpec


class ConfigError(ValueError):
    pass


@dataclass
class MeshSection:
    path: Optional[str] = None
    format: Optional[str] = None
    scale: float = 1.0
    generator: str = "training"
    length: float = 300.0
    width: float = 80.0
    height: float = 30.0
    feature_seed: int = 0

    def build(self):
        if self.path is not None:
            return load_mesh(self.path, format=self.format, scale=self.scale)
        if self.generator == "training":
            return make_training_piece(self.length, self.width, self.height, self.feature_seed)
        return make_test_piece(self.length, self.width, self.height, seed=self.feature_seed)


@dataclass
class SensorSection:
    working_distance: float = 400.0
    z_range: float = 250.0
    fov: float = 63.5
    points_per_profile: int = 4096
    z_resolution: float = 3.8
    noise_sigma_z: float = 0.0038
    speckle_strength: float = 0.01

    def build(self, seed=0):
        return SensorSpec(**dataclasses.asdict(self), rng_seed=seed)


@dataclass
class EpisodeSection:
    ds_opt: float = 0.5
    alpha_max: float = 30.0
    weights: list = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    max_steps: int = 2000
    lost_surface_patience: int = 25
    dy_max: float = 1.0
    dz_max: float = 1.0
    dtheta_max: float = 1.0
    theta_limit: float = 60.0

    def build(self):
        return EpisodeDefaults(self.ds_opt, self.alpha_max, tuple(self.weights), self.max_steps,
                               self.lost_surface_patience, ActionBounds(self.dy_max, self.dz_max, self.dtheta_max),
                               self.theta_limit)


@dataclass
class PpoSection:
    learning_rate: float = 3e-4
    rollout_length: int = 2048
    batch_size: int = 64
    gamma: float = 0.99
    clip_ratio: float = 0.2
    epochs: int = 10
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    total_steps: int = 200_000
    hidden: list = field(default_factory=lambda: [64, 64])
    log_std_init: float = 0.0
    adam_eps: float = 1e-5
    eval_episodes: int = 10

    def build(self, seed=0):
        d = dataclasses.asdict(self)
        d.pop("eval_episodes")
        return PpoConfig(**d, seed=seed)


@dataclass
class PlannerSection:
    advance_dir: list = field(default_factory=lambda: [1.0, 0.0, 0.0])
    pass_width: Optional[float] = None
    overlap: float = 0.2
    clearance: float = 50.0
    edge_margin: float = 5.0
    baseline_step: Optional[float] = None
    start_xy: Optional[list] = None
    end_xy: Optional[list] = None


@dataclass
class EvaluationSection:
    noise: bool = True
    image_width: int = 800
    image_height: int = 600
    distance_limit: Optional[float] = None
    orientation_limit: Optional[float] = None
    pointcloud_format: str = "ply"


SECTIONS = {
    "mesh": MeshSection,
    "sensor": SensorSection,
    "episode": EpisodeSection,
    "ppo": PpoSection,
    "planner": PlannerSection,
    "evaluation": EvaluationSection,
}

_TYPES = {float: (int, float), int: (int,), str: (str,), bool: (bool,), list: (list, tuple)}


def _check_type(name, value, annotation):
    # typing caches Optional[...] objects only up to a limit, so match structurally
    opt = get_origin(annotation) is Union and type(None) in get_args(annotation)
    if opt:
        annotation = next(a for a in get_args(annotation) if a is not type(None))
    if value is None:
        if opt:
            return None
        raise ConfigError(f"{name}: must not be null")
    ok = _TYPES[annotation]
    if isinstance(value, bool) and annotation is not bool:
        raise ConfigError(f"{name}: expected {annotation.__name__}, got bool")
    if not isinstance(value, ok):
        raise ConfigError(f"{name}: expected {annotation.__name__}, got {type(value).__name__}")
    if annotation is float:
        return float(value)
    if annotation is list:
        return list(value)
    return value


def _section(name, cls, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown field")
    kwargs = {k: _check_type(f"{name}.{k}", v, fields[k].type) for k, v in raw.items()}
    return cls(**kwargs)


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    mesh: MeshSection = field(default_factory=MeshSection)
    sensor: SensorSection = field(default_factory=SensorSection)
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    source: Optional[str] = field(default=None, compare=False)

    @classmethod
    def from_dict(cls, raw, base_dir=None):
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
        allowed = {"seed", "output_dir"} | set(SECTIONS)
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        kw = {name: _section(name, c, raw.get(name)) for name, c in SECTIONS.items()}
        seed = raw.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("seed: expected int")
        out = raw.get("output_dir", "runs/default")
        if not isinstance(out, str):
            raise ConfigError("output_dir: expected str")
        cfg = cls(seed=seed, output_dir=out, **kw)
        if cfg.mesh.path is not None and base_dir is not None and not Path(cfg.mesh.path).is_absolute():
            cfg.mesh.path = str(Path(base_dir) / cfg.mesh.path)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: invalid YAML in {path}: {exc}") from exc
        cfg = cls.from_dict(raw, base_dir=path.parent)
        cfg.source = str(path)
        return cfg

    def validate(self):
        if self.mesh.path is not None and not Path(self.mesh.path).is_file():
            raise ConfigError(f"mesh.path: file not found: {self.mesh.path}")
        if self.mesh.generator not in ("training", "test"):
            raise ConfigError("mesh.generator: must be 'training' or 'test'")
        if self.evaluation.pointcloud_format not in ("ply", "ply-ascii", "csv"):
            raise ConfigError("evaluation.pointcloud_format: must be ply, ply-ascii or csv")
        if len(self.planner.advance_dir) != 3:
            raise ConfigError("planner.advance_dir: expected three numbers")
        for name in ("start_xy", "end_xy"):
            v = getattr(self.planner, name)
            if v is not None and len(v) != 2:
                raise ConfigError(f"planner.{name}: expected two numbers")
        if (self.planner.start_xy is None) != (self.planner.end_xy is None):
            raise ConfigError("planner.start_xy: start_xy and end_xy must be given together")
        checks = [
            ("sensor", lambda: self.sensor.build(self.seed)),
            ("episode", self.episode.build),
            ("ppo", lambda: self.ppo.build(self.seed)),
        ]
        for name, fn in checks:
            try:
                fn()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        if self.ppo.eval_episodes < 1:
            raise ConfigError("ppo.eval_episodes: must be positive")
        if not 0 <= self.planner.overlap < 1:
            raise ConfigError("planner.overlap: must lie in [0, 1)")
        if self.planner.pass_width is not None and self.planner.pass_width <= 0:
            raise ConfigError("planner.pass_width: must be positive")
        if self.planner.baseline_step is not None and self.planner.baseline_step <= 0:
            raise ConfigError("planner.baseline_step: must be positive")
        w = self.episode.weights
        if len(w) != 3 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ConfigError("episode.weights: three non-negative numbers summing to 1")
        return self

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed))

    def sensor_spec(self):
        return self.sensor.build(self.seed)

    def episode_defaults(self):
        return self.episode.build()

    def ppo_config(self):
        return self.ppo.build(self.seed)

    def build_mesh(self):
        return self.mesh.build()

    def to_dict(self):
        d = {"seed": self.seed, "output_dir": self.output_dir}
        for name in SECTIONS:
            d[name] = dataclasses.asdict(getattr(self, name))
        return d

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self):
        """Digest of everything that affects results (not the output location)."""
        d = self.to_dict()
        d.pop("output_dir")
        return _digest(d)

    def section_digest(self, name):
        return _digest(dataclasses.asdict(getattr(self, name)))


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
