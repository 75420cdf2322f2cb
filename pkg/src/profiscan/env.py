"""Scan-pass MDP: state, bounded actions, dynamic action limits and rewards.

Motion conventions, all in the sensor's own frame:

* ``dy`` translates along the advance axis ``y_hat``;
* ``dz`` translates along the laser axis ``l_hat``, so **positive dz moves
  the sensor toward the surface** and reduces the measured distance;
* ``dtheta`` pitches the sensor about ``x_hat`` (right-handed).  The pivot
  is the tool point one working distance down the laser axis, so a pure
  pitch change does not drag the laser line along the part.

With these signs the dynamic limits are corrective: a sensor that is too
far (``D > W_d``) may only approach, and a positive direction angle may
only be reduced by a positive pitch increment.
"""
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .sensor import (
    DegenerateNormalsError,
    NoSurfaceError,
    SensorPose,
    add_noise,
    direction_angle,
    mean_profile_distance,
    simulate_profile,
)

OBS_DIM = 8
ACT_DIM = 3
OBS_CLIP = 5.0
TRACE_COLUMNS = ["step", "px", "py", "pz", "theta", "D", "alpha", "ds", "R_D", "R_alpha", "R_ds", "total", "done"]


class BadStartError(RuntimeError):
    """The start pose does not see the surface."""


@dataclass(frozen=True)
class ActionBounds:
    dy_max: float = 1.0
    dz_max: float = 1.0
    dtheta_max: float = 1.0

    def as_array(self):
        return np.array([self.dy_max, self.dz_max, self.dtheta_max])


@dataclass(frozen=True)
class ActionDelta:
    dy: float
    dz: float
    dtheta: float

    @classmethod
    def from_unit(cls, a, bounds):
        a = np.clip(np.asarray(a, dtype=float).reshape(3), -1.0, 1.0) * bounds.as_array()
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self):
        return np.array([self.dy, self.dz, self.dtheta])


@dataclass(frozen=True)
class EpisodeSpec:
    start_pose: SensorPose
    advance_dir: np.ndarray
    end_point: np.ndarray
    end_normal: np.ndarray
    ds_opt: float = 0.5
    alpha_max: float = 30.0
    weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    max_steps: int = 2000
    lost_surface_patience: int = 25
    bounds: ActionBounds = field(default_factory=ActionBounds)
    theta_limit: float = 60.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("reward weights must be three non-negative numbers summing to 1")
        if self.ds_opt <= 0 or self.alpha_max <= 0:
            raise ValueError("ds_opt and alpha_max must be positive")
        object.__setattr__(self, "advance_dir", geometry.normalize(self.advance_dir))
        object.__setattr__(self, "end_point", np.asarray(self.end_point, dtype=float))
        object.__setattr__(self, "end_normal", geometry.normalize(self.end_normal))

    @property
    def length(self):
        return float((self.end_point - self.start_pose.position) @ self.end_normal)


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    theta: float
    D: float
    alpha: float
    ds: float
    D_valid: bool
    alpha_valid: bool
    ds_valid: bool

    @property
    def valid(self):
        return self.D_valid and self.alpha_valid and self.ds_valid


@dataclass(frozen=True)
class RewardBreakdown:
    R_D: float
    R_alpha: float
    R_ds: float
    total: float


def clip_scalar(x, a, b):
    if a > b:
        raise ValueError(f"clip bounds reversed: {a} > {b}")
    if x <= a:
        return a
    if x >= b:
        return b
    return x


def dynamic_action_limit(state, raw, bounds, working_distance):
    """Limit an action so height and pitch changes can only be corrective."""
    dy = clip_scalar(raw.dy, -bounds.dy_max, bounds.dy_max)
    if state.D_valid:
        if state.D - working_distance >= 0:
            dz = clip_scalar(raw.dz, 0.0, bounds.dz_max)
        else:
            dz = clip_scalar(raw.dz, -bounds.dz_max, 0.0)
    else:
        dz = clip_scalar(raw.dz, -bounds.dz_max, bounds.dz_max)
    if state.alpha_valid:
        if state.alpha >= 0:
            dth = clip_scalar(raw.dtheta, 0.0, bounds.dtheta_max)
        else:
            dth = clip_scalar(raw.dtheta, -bounds.dtheta_max, 0.0)
    else:
        dth = clip_scalar(raw.dtheta, -bounds.dtheta_max, bounds.dtheta_max)
    return ActionDelta(dy, dz, dth)


def reward_distance(D, spec):
    return max(-1.0, -((spec.working_distance - D) ** 2) / (spec.z_range / 2) ** 2)


def reward_orientation(alpha, alpha_max):
    return max(-1.0, -(alpha ** 2) / alpha_max ** 2)


def reward_spacing(ds, ds_opt):
    return max(-1.0, -((ds - ds_opt) ** 2) / ds_opt ** 2)


def reward_total(state, spec, episode):
    r_d = reward_distance(state.D, spec) if state.D_valid else -1.0
    r_a = reward_orientation(state.alpha, episode.alpha_max) if state.alpha_valid else -1.0
    r_s = reward_spacing(state.ds, episode.ds_opt) if state.ds_valid else -1.0
    w = episode.weights
    return RewardBreakdown(r_d, r_a, r_s, w[0] * r_d + w[1] * r_a + w[2] * r_s)


def observe(state, episode, spec, origin=None, frame=None):
    """Fixed-length network input built from a state."""
    origin = episode.start_pose.position if origin is None else origin
    frame = episode.start_pose.frame if frame is None else frame
    scale = max(abs(episode.length), 1.0)
    p = (state.position - origin) @ frame / scale
    obs = np.empty(OBS_DIM)
    obs[0:3] = p
    obs[3] = state.theta / episode.alpha_max
    obs[4] = (state.D - spec.working_distance) / (spec.z_range / 2) if state.D_valid else -1.0
    obs[5] = state.alpha / episode.alpha_max if state.alpha_valid else -1.0
    obs[6] = state.ds / episode.ds_opt - 1.0 if state.ds_valid else -1.0
    obs[7] = 1.0 if state.valid else 0.0
    return np.clip(obs, -OBS_CLIP, OBS_CLIP)


def _measure(profile):
    try:
        D = mean_profile_distance(profile)
    except NoSurfaceError:
        return np.nan, np.nan, False, False
    try:
        alpha = direction_angle(profile)
    except DegenerateNormalsError:
        return D, np.nan, True, False
    return D, alpha, True, True


def apply_motion(pose, action, working_distance):
    """New pose after translating by (dy, dz) and pitching by dtheta in the sensor frame."""
    p = pose.position + action.dy * pose.y_hat + action.dz * pose.l_hat
    tcp = p + working_distance * pose.l_hat
    q = geometry.quat_multiply(pose.quat, geometry.quat_about_x(action.dtheta))
    new = SensorPose(p, q)
    new.position = tcp - working_distance * new.l_hat
    return new


class ScanEnv:
    """One scan pass over a mesh as an episodic environment."""

    obs_dim = OBS_DIM
    act_dim = ACT_DIM

    def __init__(self, accel, spec, episode, seed=0, noise=True, record_trace=False):
        self.accel = accel
        self.spec = spec
        self.episode = episode
        self.noise = noise
        self.record_trace = record_trace
        self._rng = np.random.default_rng(seed)
        self._done = True
        self.trace = []

    def _capture(self, pose):
        prof = simulate_profile(self.accel, pose, self.spec)
        if self.noise:
            prof = add_noise(prof, self.spec, self._rng)
        return prof

    def reset(self, episode=None, seed=None):
        if episode is not None:
            self.episode = episode
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        ep = self.episode
        self.pose = SensorPose(ep.start_pose.position, ep.start_pose.quat)
        self.theta = 0.0
        self.profile = self._capture(self.pose)
        D, alpha, dv, av = _measure(self.profile)
        if not (dv and av):
            raise BadStartError("start pose sees no surface within the depth window")
        self._last_centroid = self.profile.centroid()
        self.state = EnvState(self.pose.position.copy(), 0.0, D, alpha, ep.ds_opt, True, True, True)
        self.n_steps = 0
        self._lost = 0
        self._done = False
        self.trace = []
        return self.state

    def observe(self, state=None):
        return observe(self.state if state is None else state, self.episode, self.spec)

    def step(self, action):
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        ep = self.episode
        raw = action if isinstance(action, ActionDelta) else ActionDelta.from_unit(action, ep.bounds)
        lim = dynamic_action_limit(self.state, raw, ep.bounds, self.spec.working_distance)
        dth = clip_scalar(lim.dtheta, -ep.theta_limit - self.theta, ep.theta_limit - self.theta)
        lim = ActionDelta(lim.dy, lim.dz, dth)
        self.pose = apply_motion(self.pose, lim, self.spec.working_distance)
        self.theta += dth
        self.profile = self._capture(self.pose)
        D, alpha, dv, av = _measure(self.profile)
        if dv:
            c = self.profile.centroid()
            ds = float((c - self._last_centroid) @ ep.advance_dir)
            self._last_centroid = c
            ref = c
            self._lost = 0
        else:
            ds = np.nan
            ref = self.pose.position + self.spec.working_distance * self.pose.l_hat
            self._lost += 1
        self.state = EnvState(self.pose.position.copy(), self.theta, D, alpha, ds, dv, av, dv)
        reward = reward_total(self.state, self.spec, ep)
        self.n_steps += 1
        reason = None
        if (ref - ep.end_point) @ ep.end_normal >= 0:
            reason = "end_plane"
        elif self._lost >= ep.lost_surface_patience:
            reason = "lost_surface"
        elif self.n_steps >= ep.max_steps:
            reason = "max_steps"
        self._done = reason is not None
        if self.record_trace:
            p = self.state.position
            self.trace.append([self.n_steps, p[0], p[1], p[2], self.theta, D, alpha, ds,
                               reward.R_D, reward.R_alpha, reward.R_ds, reward.total, int(self._done)])
        info = {"action": lim, "n_valid": self.profile.n_valid, "reason": reason}
        return self.state, reward, self._done, info


def write_trace_csv(rows, path, meta=None):
    with open(path, "w", newline="") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    return path


@dataclass(frozen=True)
class EpisodeDefaults:
    """Per-run episode parameters; combined with a pass to form an :class:`EpisodeSpec`."""

    ds_opt: float = 0.5
    alpha_max: float = 30.0
    weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    max_steps: int = 2000
    lost_surface_patience: int = 25
    bounds: ActionBounds = field(default_factory=ActionBounds)
    theta_limit: float = 60.0

    def episode(self, start_pose, advance_dir, end_point, end_normal=None):
        return EpisodeSpec(
            start_pose=start_pose,
            advance_dir=advance_dir,
            end_point=end_point,
            end_normal=advance_dir if end_normal is None else end_normal,
            ds_opt=self.ds_opt,
            alpha_max=self.alpha_max,
            weights=tuple(self.weights),
            max_steps=self.max_steps,
            lost_surface_patience=self.lost_surface_patience,
            bounds=self.bounds,
            theta_limit=self.theta_limit,
        )
