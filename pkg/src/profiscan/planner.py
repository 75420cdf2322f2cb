"""Boustrophedon pass planning, policy rollouts and trajectory files."""
import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .env import EpisodeDefaults, ScanEnv
from .mesh import MeshError
from .policy import _act
from .raycast import build_accel
from .sensor import NoSurfaceError, SensorPose, mean_profile_distance, simulate_profile

TRAJ_COLUMNS = ["idx", "pass_id", "capture", "x_mm", "y_mm", "z_mm", "qw", "qx", "qy", "qz", "theta_deg"]
DOWN = np.array([0.0, 0.0, -1.0])


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class PassSpec:
    pass_id: int
    start: np.ndarray
    quat: np.ndarray
    advance_dir: np.ndarray
    end_point: np.ndarray
    lateral: float = 0.0

    @property
    def end_normal(self):
        return self.advance_dir

    @property
    def length(self):
        return float((self.end_point - self.start) @ self.advance_dir)

    @property
    def start_pose(self):
        return SensorPose(self.start, self.quat)

    def episode(self, defaults):
        return defaults.episode(self.start_pose, self.advance_dir, self.end_point, self.advance_dir)


@dataclass
class BoustrophedonPlan:
    passes: list
    d: float
    overlap: float
    pass_width: float
    lateral_dir: np.ndarray
    footprint: tuple
    intervals: list = field(default_factory=list)

    def max_gap(self):
        """Largest uncovered lateral width over the footprint (0 when covered)."""
        lo, hi = self.footprint
        ivs = sorted(self.intervals)
        gap = max(0.0, ivs[0][0] - lo, hi - max(e for _, e in ivs))
        reach = ivs[0][1]
        for a, e in ivs[1:]:
            gap = max(gap, a - reach)
            reach = max(reach, e)
        return gap

    def summary_rows(self):
        return [
            (p.pass_id, p.start.tolist(), p.end_point.tolist(), p.advance_dir.tolist(), self.d)
            for p in self.passes
        ]

    def summary_table(self):
        lines = [f"{'pass':>4}  {'start (mm)':<32} {'end (mm)':<32} {'direction':<18} {'d (mm)':>8}"]
        for pid, s, e, dr, d in self.summary_rows():
            fs = "(" + ", ".join(f"{v:.1f}" for v in s) + ")"
            fe = "(" + ", ".join(f"{v:.1f}" for v in e) + ")"
            fd = "(" + ", ".join(f"{v:+.0f}" for v in dr) + ")"
            lines.append(f"{pid:>4}  {fs:<32} {fe:<32} {fd:<18} {d:>8.2f}")
        return "\n".join(lines)


def default_pass_width(spec):
    return spec.line_width() * 0.8


def start_height_pose(accel, spec, xy_point, advance_dir, z_top):
    """Pose above ``xy_point`` looking down with mean distance equal to W_d."""
    frame = geometry.frame_from_axes(advance_dir, DOWN)
    quat = geometry.matrix_to_quat(frame)
    for k in range(int(math.ceil(2 * (z_top - accel.mesh.bounds[0][2]) / spec.z_range)) + 2):
        z = z_top + spec.working_distance - k * spec.z_range / 2
        pose = SensorPose([xy_point[0], xy_point[1], z], quat)
        try:
            D = mean_profile_distance(simulate_profile(accel, pose, spec))
        except NoSurfaceError:
            continue
        for _ in range(5):
            pose = SensorPose(pose.position + (D - spec.working_distance) * pose.l_hat, quat)
            D = mean_profile_distance(simulate_profile(accel, pose, spec))
            if abs(D - spec.working_distance) < 1e-9:
                break
        return pose
    raise NoSurfaceError(f"no surface found below {list(xy_point)}")


def plan_boustrophedon(mesh, spec, advance_dir=(1.0, 0.0, 0.0), pass_width=None, overlap=0.2,
                       edge_margin=5.0, accel=None):
    """Parallel passes with alternating directions tiling the lateral footprint."""
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    pw = default_pass_width(spec) if pass_width is None else float(pass_width)
    if pw <= 0:
        raise ValueError("pass_width must be positive")
    adv = np.asarray(advance_dir, dtype=float)
    adv = geometry.normalize(adv - adv[2] * np.array([0.0, 0.0, 1.0]))
    lat = np.cross(adv, DOWN)
    accel = build_accel(mesh) if accel is None else accel
    used = mesh.vertices[np.unique(mesh.triangles)]
    s = used @ lat
    a = used @ adv
    smin, smax = float(s.min()), float(s.max())
    amin, amax = float(a.min()), float(a.max())
    width = smax - smin
    if width <= 0 or amax - amin <= 2 * edge_margin:
        raise MeshError("mesh has an empty footprint")
    d = pw * (1.0 - overlap)
    n = 1 if width <= pw else int(math.ceil((width - pw) / d)) + 1
    a0 = min(smin, smin - (pw + (n - 1) * d - width) / 2.0)
    lefts = [a0]
    for _ in range(n - 1):
        lefts.append(lefts[-1] + d)
    while lefts[-1] + pw < smax:
        lefts.append(lefts[-1] + d)
    intervals = [(L, L + pw) for L in lefts]
    z_top = float(used[:, 2].max())
    passes = []
    for k, L in enumerate(lefts):
        c = L + pw / 2.0
        direction = adv if k % 2 == 0 else -adv
        a_start = amin + edge_margin if k % 2 == 0 else amax - edge_margin
        a_end = amax - edge_margin if k % 2 == 0 else amin + edge_margin
        p_start = c * lat + a_start * adv
        p_end = c * lat + a_end * adv
        pose = start_height_pose(accel, spec, p_start[:2], direction, z_top)
        end_point = np.array([p_end[0], p_end[1], pose.position[2]])
        passes.append(PassSpec(k, pose.position, pose.quat, direction.copy(), end_point, c))
    return BoustrophedonPlan(passes, d, overlap, pw, lat, (smin, smax), intervals)


def plan_single_pass(mesh, spec, start_xy, end_xy, accel=None):
    """One manually placed pass from ``start_xy`` to ``end_xy`` (top view)."""
    accel = build_accel(mesh) if accel is None else accel
    a = np.array([start_xy[0], start_xy[1], 0.0])
    b = np.array([end_xy[0], end_xy[1], 0.0])
    if np.linalg.norm(b - a) == 0:
        raise ValueError("start and end points coincide")
    adv = geometry.normalize(b - a)
    lat = np.cross(adv, DOWN)
    z_top = float(mesh.bounds[1][2])
    pose = start_height_pose(accel, spec, a[:2], adv, z_top)
    end_point = np.array([b[0], b[1], pose.position[2]])
    pw = default_pass_width(spec)
    c = float(a @ lat)
    p = PassSpec(0, pose.position, pose.quat, adv, end_point, c)
    return BoustrophedonPlan([p], pw, 0.0, pw, lat, (c - pw / 2, c + pw / 2), [(c - pw / 2, c + pw / 2)])


@dataclass
class Trajectory:
    positions: np.ndarray
    quats: np.ndarray
    theta: np.ndarray
    pass_id: np.ndarray
    capture: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        self.pass_id = np.asarray(self.pass_id, dtype=np.int64).reshape(-1)
        self.capture = np.asarray(self.capture, dtype=bool).reshape(-1)
        n = len(self.positions)
        if not all(len(a) == n for a in (self.quats, self.theta, self.pass_id, self.capture)):
            raise TrajectoryError("trajectory arrays have inconsistent lengths")

    @classmethod
    def empty(cls, meta=None):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), [], [], [], dict(meta or {}))

    @classmethod
    def from_poses(cls, poses, thetas, pass_id, capture=True, meta=None):
        n = len(poses)
        return cls(
            np.array([p.position for p in poses]).reshape(-1, 3),
            np.array([p.quat for p in poses]).reshape(-1, 4),
            thetas,
            np.full(n, pass_id),
            np.full(n, capture),
            dict(meta or {}),
        )

    def __len__(self):
        return len(self.positions)

    def pose(self, i):
        return SensorPose(self.positions[i], self.quats[i])

    def frames(self):
        return np.array([geometry.quat_to_matrix(q) for q in self.quats])

    @property
    def capture_count(self):
        return int(np.count_nonzero(self.capture))

    @property
    def pass_ids(self):
        return sorted(set(self.pass_id[self.capture].tolist()))

    def advance_dir(self, pid):
        dirs = self.meta.get("advance_dirs", {})
        if str(pid) in dirs:
            return np.asarray(dirs[str(pid)], dtype=float)
        sel = np.nonzero(self.capture & (self.pass_id == pid))[0]
        delta = self.positions[sel[-1]] - self.positions[sel[0]]
        delta[2] = 0.0
        if not np.any(delta):
            # a single record: fall back to the frame's advance axis
            delta = self.pose(sel[0]).y_hat.copy()
            delta[2] = 0.0
        return geometry.normalize(delta)

    def equals(self, other):
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.quats, other.quats)
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.pass_id, other.pass_id)
            and np.array_equal(self.capture, other.capture)
            and self.meta == other.meta
        )


def concat_trajectories(parts, meta=None):
    parts = [p for p in parts if len(p)]
    if not parts:
        return Trajectory.empty(meta)
    return Trajectory(
        np.vstack([p.positions for p in parts]),
        np.vstack([p.quats for p in parts]),
        np.concatenate([p.theta for p in parts]),
        np.concatenate([p.pass_id for p in parts]),
        np.concatenate([p.capture for p in parts]),
        dict(meta or {}),
    )


class PassCycleEnv(ScanEnv):
    """Environment that advances to the next pass of a plan on every reset."""

    def __init__(self, accel, spec, episodes, seed=0, noise=True):
        self._episodes = list(episodes)
        if not self._episodes:
            raise ValueError("need at least one episode")
        self._k = -1
        super().__init__(accel, spec, self._episodes[0], seed=seed, noise=noise)

    def reset(self, episode=None, seed=None):
        if episode is None:
            self._k = (self._k + 1) % len(self._episodes)
            episode = self._episodes[self._k]
        return super().reset(episode, seed)


def rollout_policy(accel, spec, params, pass_spec, defaults=None, seed=0, noise=True):
    """Deterministic policy rollout along one pass: ``(segment, trace_rows)``."""
    defaults = EpisodeDefaults() if defaults is None else defaults
    env = ScanEnv(accel, spec, pass_spec.episode(defaults), seed=seed, noise=noise, record_trace=True)
    env.reset()
    poses = [env.pose]
    thetas = [0.0]
    info = {"reason": None}
    done = False
    while not done:
        a, _, _, _ = _act(params, env.observe(), None, deterministic=True)
        _, _, done, info = env.step(a)
        poses.append(env.pose)
        thetas.append(env.theta)
    if info["reason"] == "lost_surface":
        warnings.warn(f"pass {pass_spec.pass_id}: surface lost, segment truncated", stacklevel=2)
        keep = len(poses) - env.episode.lost_surface_patience
        poses, thetas = poses[:keep], thetas[:keep]
    seg = Trajectory.from_poses(poses, thetas, pass_spec.pass_id,
                                meta={"advance_dirs": {str(pass_spec.pass_id): pass_spec.advance_dir.tolist()}})
    return seg, env.trace


def make_static_baseline(pass_spec, spec, step):
    """Straight pass at the start height and orientation, ``step`` mm per record."""
    if step <= 0:
        raise ValueError("step must be positive")
    n = max(1, int(math.ceil(pass_spec.length / step - 1e-9)))
    k = np.arange(n, dtype=float)
    pos = pass_spec.start[None, :] + (k * step)[:, None] * pass_spec.advance_dir[None, :]
    return Trajectory(pos, np.repeat(pass_spec.quat[None, :], n, axis=0), np.zeros(n), np.full(n, pass_spec.pass_id),
                      np.ones(n, dtype=bool),
                      {"advance_dirs": {str(pass_spec.pass_id): pass_spec.advance_dir.tolist()}})


def assemble(plan, segments, clearance=50.0, meta=None):
    """Concatenate pass segments with two lifted transit records between passes."""
    if len(segments) != len(plan.passes):
        raise TrajectoryError(f"expected {len(plan.passes)} segments, got {len(segments)}")
    parts = []
    dirs = {}
    for k, (p, seg) in enumerate(zip(plan.passes, segments)):
        if seg is None or len(seg) == 0:
            raise TrajectoryError(f"missing segment for pass {p.pass_id}")
        dirs.update(seg.meta.get("advance_dirs", {str(p.pass_id): p.advance_dir.tolist()}))
        if k:
            prev = segments[k - 1]
            z = max(prev.positions[-1, 2], seg.positions[0, 2]) + clearance
            a = prev.positions[-1].copy()
            b = seg.positions[0].copy()
            a[2] = z
            b[2] = z
            parts.append(Trajectory([a, b], [prev.quats[-1], seg.quats[0]], [prev.theta[-1], 0.0],
                                    [prev.pass_id[-1], p.pass_id], [False, False]))
        parts.append(seg)
    m = dict(meta or {})
    m["advance_dirs"] = dirs
    return concat_trajectories(parts, m)


def export_trajectory(traj, path, format=None):
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(traj.meta, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(TRAJ_COLUMNS)
            for i in range(len(traj)):
                w.writerow([i, int(traj.pass_id[i]), int(traj.capture[i]),
                            *(repr(float(v)) for v in traj.positions[i]),
                            *(repr(float(v)) for v in traj.quats[i]), repr(float(traj.theta[i]))])
    elif fmt == "json":
        doc = {
            "meta": traj.meta,
            "columns": TRAJ_COLUMNS,
            "records": [
                {"idx": i, "pass_id": int(traj.pass_id[i]), "capture": bool(traj.capture[i]),
                 "position": traj.positions[i].tolist(), "quat": traj.quats[i].tolist(),
                 "theta_deg": float(traj.theta[i])}
                for i in range(len(traj))
            ],
        }
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    else:
        raise TrajectoryError(f"unknown trajectory format {fmt!r}")
    return path


def load_trajectory(path):
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(path.read_text())
            recs = doc["records"]
            if not recs:
                return Trajectory.empty(doc.get("meta"))
            return Trajectory([r["position"] for r in recs], [r["quat"] for r in recs],
                              [r["theta_deg"] for r in recs], [r["pass_id"] for r in recs],
                              [r["capture"] for r in recs], doc.get("meta", {}))
        with open(path, newline="") as fh:
            first = fh.readline()
            meta = json.loads(first[1:]) if first.startswith("#") else {}
            if not first.startswith("#"):
                fh.seek(0)
            rows = list(csv.reader(fh))
    except (OSError, KeyError, ValueError) as exc:
        raise TrajectoryError(f"cannot read trajectory {path}: {exc}") from exc
    if not rows or rows[0] != TRAJ_COLUMNS:
        raise TrajectoryError("trajectory CSV header mismatch")
    body = rows[1:]
    if not body:
        return Trajectory.empty(meta)
    a = np.array(body, dtype=object)
    return Trajectory(a[:, 3:6].astype(float), a[:, 6:10].astype(float), a[:, 10].astype(float),
                      a[:, 1].astype(int), a[:, 2].astype(int).astype(bool), meta)
