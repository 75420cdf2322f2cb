"""scikit-learn style front end: ``fit`` trains on a mesh, ``predict`` plans one."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_direction, check_fraction, check_mesh, check_positive, check_seed
from .env import EpisodeDefaults
from .evaluation import replay, summarize
from .planner import (
    PassCycleEnv,
    assemble,
    make_static_baseline,
    plan_boustrophedon,
    rollout_policy,
)
from .policy import PpoConfig, evaluate_policy, train
from .raycast import build_accel
from .sensor import SensorSpec


class TrajectoryOptimizer(BaseEstimator):
    """Learn a scanning policy on one mesh and plan trajectories on others.

    ``X`` is always a :class:`~profiscan.mesh.TriangleMesh`.  ``predict``
    returns the assembled policy trajectory; ``predict_baseline`` returns
    the fixed-height straight-line counterpart over the same passes.
    """

    def __init__(self, sensor=None, episode=None, ppo=None, total_steps=200_000, seed=0,
                 advance_dir=(1.0, 0.0, 0.0), pass_width=None, overlap=0.2, edge_margin=5.0,
                 clearance=50.0, noise=True):
        self.sensor = sensor
        self.episode = episode
        self.ppo = ppo
        self.total_steps = total_steps
        self.seed = seed
        self.advance_dir = advance_dir
        self.pass_width = pass_width
        self.overlap = overlap
        self.edge_margin = edge_margin
        self.clearance = clearance
        self.noise = noise

    def _resolved(self):
        spec = self.sensor if self.sensor is not None else SensorSpec()
        defaults = self.episode if self.episode is not None else EpisodeDefaults()
        seed = check_seed(self.seed)
        steps = int(check_positive(self.total_steps, "total_steps"))
        if self.ppo is None:
            ppo = PpoConfig(total_steps=steps, seed=seed)
        else:
            d = self.ppo.to_dict()
            d.update(total_steps=steps, seed=seed)
            ppo = PpoConfig(**d)
        return spec, defaults, ppo

    def _plan(self, mesh, spec, accel):
        check_fraction(self.overlap, "overlap")
        check_positive(self.pass_width, "pass_width", allow_none=True)
        return plan_boustrophedon(mesh, spec, check_direction(self.advance_dir), self.pass_width, self.overlap,
                                  self.edge_margin, accel=accel)

    def fit(self, X, y=None, callback=None):
        mesh = check_mesh(X)
        spec, defaults, ppo = self._resolved()
        accel = build_accel(mesh)
        plan = self._plan(mesh, spec, accel)
        episodes = [p.episode(defaults) for p in plan.passes]
        self.params_, self.history_ = train(
            lambda s: PassCycleEnv(accel, spec, episodes, seed=s, noise=self.noise), ppo, callback=callback)
        self.mesh_digest_ = mesh.digest()
        self.n_passes_ = len(plan.passes)
        return self

    def _rollouts(self, X):
        check_is_fitted(self, "params_")
        mesh = check_mesh(X)
        spec, defaults, _ = self._resolved()
        accel = build_accel(mesh)
        plan = self._plan(mesh, spec, accel)
        return mesh, spec, defaults, accel, plan

    def predict(self, X):
        mesh, spec, defaults, accel, plan = self._rollouts(X)
        segs = [rollout_policy(accel, spec, self.params_, p, defaults, seed=self.seed + p.pass_id, noise=self.noise)[0]
                for p in plan.passes]
        return assemble(plan, segs, self.clearance, meta={"mesh_digest": mesh.digest(), "seed": self.seed,
                                                          "kind": "rl"})

    def predict_baseline(self, X, step=None):
        check_mesh(X)
        spec, defaults, _ = self._resolved()
        accel = build_accel(X)
        plan = self._plan(X, spec, accel)
        step = defaults.ds_opt if step is None else check_positive(step, "step")
        segs = [make_static_baseline(p, spec, step) for p in plan.passes]
        return assemble(plan, segs, self.clearance, meta={"mesh_digest": X.digest(), "seed": self.seed,
                                                          "kind": "baseline"})

    def score(self, X, y=None, n_episodes=1):
        """Mean normalized reward of deterministic rollouts over every pass of ``X``."""
        mesh, spec, defaults, accel, plan = self._rollouts(X)
        episodes = [p.episode(defaults) for p in plan.passes]
        env = PassCycleEnv(accel, spec, episodes, seed=self.seed, noise=self.noise)
        res = evaluate_policy(env, self.params_, n_episodes * len(episodes), seed=self.seed)
        return float(np.mean([r[0] for r in res]))

    def report(self, X, trajectory=None):
        """Replay a trajectory (default: ``predict(X)``) and summarize its errors."""
        spec, defaults, _ = self._resolved()
        traj = self.predict(X) if trajectory is None else trajectory
        emap = replay(build_accel(check_mesh(X)), spec, traj, seed=self.seed, noise=self.noise)
        return summarize(emap, spec, defaults.ds_opt)
