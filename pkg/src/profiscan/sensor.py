"""Laser-line profilometer simulation and scan-quality measures.

Sensor frame conventions (columns of the pose rotation matrix):

* ``x_hat`` -- lateral axis along which the laser line spreads,
* ``y_hat`` -- advance (scan) direction,
* ``l_hat`` -- laser axis pointing at the surface, ``l_hat = x_hat x y_hat``.

A measured point has sensor coordinates ``(x_s, 0, z_s)``; ``z_s`` is its
depth along ``l_hat``, which is what the depth-of-field window bounds.
"""
import csv
from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .raycast import raycast_many


SIGN_EPS = 1e-12


class NoSurfaceError(ValueError):
    """The profile has no valid point."""


class DegenerateNormalsError(ValueError):
    """Valid normals average to the zero vector."""


@dataclass(frozen=True)
class SensorSpec:
    working_distance: float = 400.0
    z_range: float = 250.0
    fov: float = 63.5
    points_per_profile: int = 4096
    z_resolution: float = 3.8  # micrometres
    noise_sigma_z: float = 0.0038  # mm
    speckle_strength: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.z_range > 0 and self.working_distance > self.z_range / 2):
            raise ValueError("need working_distance > z_range / 2 > 0")
        if not 0 < self.fov < 180:
            raise ValueError("fov must lie in (0, 180) degrees")
        if int(self.points_per_profile) < 2:
            raise ValueError("points_per_profile must be at least 2")
        if self.noise_sigma_z < 0 or not 0 <= self.speckle_strength < 1:
            raise ValueError("noise must satisfy sigma >= 0 and 0 <= speckle < 1")

    @property
    def z_min(self):
        return self.working_distance - self.z_range / 2

    @property
    def z_max(self):
        return self.working_distance + self.z_range / 2

    def line_width(self, distance=None):
        """Lateral extent of the laser line at ``distance`` (default: working distance)."""
        d = self.working_distance if distance is None else distance
        return 2.0 * d * np.tan(np.deg2rad(self.fov) / 2)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class SensorPose:
    """Sensor position plus orientation, stored as a unit quaternion."""

    __slots__ = ("position", "quat", "frame")

    def __init__(self, position, quat):
        self.position = np.asarray(position, dtype=float).reshape(3).copy()
        self.quat = geometry.quat_normalize(quat)
        self.frame = geometry.quat_to_matrix(self.quat)

    @classmethod
    def from_axes(cls, position, advance, laser=(0.0, 0.0, -1.0)):
        return cls(position, geometry.matrix_to_quat(geometry.frame_from_axes(advance, laser)))

    @property
    def x_hat(self):
        return self.frame[:, 0]

    @property
    def y_hat(self):
        return self.frame[:, 1]

    @property
    def l_hat(self):
        return self.frame[:, 2]

    def __repr__(self):
        return f"SensorPose(position={self.position.tolist()}, quat={self.quat.tolist()})"


@dataclass(frozen=True)
class Profile:
    """One laser-line capture; invalid entries hold NaN."""

    valid: np.ndarray
    z: np.ndarray
    range: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    pose: SensorPose

    @property
    def n_valid(self):
        return int(np.count_nonzero(self.valid))

    def centroid(self):
        if not self.valid.any():
            raise NoSurfaceError("profile has no valid points")
        return self.points[self.valid].mean(axis=0)


def ray_directions(pose, spec):
    half = np.deg2rad(spec.fov) / 2
    ang = np.linspace(-half, half, int(spec.points_per_profile))
    d = np.cos(ang)[:, None] * pose.l_hat[None, :] + np.sin(ang)[:, None] * pose.x_hat[None, :]
    return d / np.linalg.norm(d, axis=1)[:, None]


def simulate_profile(accel, pose, spec):
    """Cast the laser fan from ``pose`` and keep hits inside the depth window.

    Hit normals are oriented toward the sensor.
    """
    dirs = ray_directions(pose, spec)
    t, tri = raycast_many(accel, pose.position, dirs)
    hit = tri >= 0
    n = len(t)
    z = np.full(n, np.nan)
    rng_ = np.full(n, np.nan)
    pts = np.full((n, 3), np.nan)
    nrm = np.full((n, 3), np.nan)
    if hit.any():
        th = t[hit]
        dh = dirs[hit]
        zh = th * (dh @ pose.l_hat)
        z[hit] = zh
        rng_[hit] = th
        pts[hit] = pose.position + th[:, None] * dh
        nh = accel.mesh.tri_normals[tri[hit]]
        flip = np.einsum("ij,ij->i", nh, dh) > 0
        nh = np.where(flip[:, None], -nh, nh)
        nrm[hit] = nh
    valid = hit & (z >= spec.z_min) & (z <= spec.z_max)
    z[~valid] = np.nan
    rng_[~valid] = np.nan
    pts[~valid] = np.nan
    nrm[~valid] = np.nan
    return Profile(valid, z, rng_, pts, nrm, pose)


def add_noise(profile, spec, rng):
    """Speckle (multiplicative, uniform) plus Gaussian range noise on valid points."""
    if spec.noise_sigma_z == 0 and spec.speckle_strength == 0:
        return profile
    v = profile.valid
    k = int(np.count_nonzero(v))
    u = rng.uniform(-1.0, 1.0, k)
    g = rng.normal(0.0, spec.noise_sigma_z, k) if spec.noise_sigma_z > 0 else np.zeros(k)
    z_old = profile.z[v]
    z_new = z_old * (1.0 + spec.speckle_strength * u) + g
    scale = z_new / z_old
    z = profile.z.copy()
    r = profile.range.copy()
    pts = profile.points.copy()
    z[v] = z_new
    r[v] = profile.range[v] * scale
    o = profile.pose.position
    pts[v] = o + scale[:, None] * (profile.points[v] - o)
    ok = (z >= spec.z_min) & (z <= spec.z_max)
    valid = v & ok
    nrm = profile.normals.copy()
    drop = v & ~ok
    z[drop] = np.nan
    r[drop] = np.nan
    pts[drop] = np.nan
    nrm[drop] = np.nan
    return replace(profile, valid=valid, z=z, range=r, points=pts, normals=nrm)


def mean_profile_distance(profile):
    if not profile.valid.any():
        raise NoSurfaceError("no surface in the depth window")
    return float(np.mean(profile.z[profile.valid]))


def mean_normal(profile):
    if not profile.valid.any():
        raise NoSurfaceError("no surface in the depth window")
    n = profile.normals[profile.valid].mean(axis=0)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise DegenerateNormalsError("valid normals average to zero")
    return n / norm


def direction_angle(profile, pose=None):
    """Signed angle (degrees) between the laser axis and the mean surface normal.

    Positive when the mean normal leans toward the advance direction.
    """
    pose = profile.pose if pose is None else pose
    n = mean_normal(profile)
    alpha = np.degrees(np.arccos(np.clip(-pose.l_hat @ n, -1.0, 1.0)))
    # a purely lateral tilt has no pitch sign; rounding noise must not pick one
    return float(-alpha if n @ pose.y_hat < -SIGN_EPS else alpha)


def profile_spacing(prev, cur, advance_dir):
    """Signed advance of the valid-point centroid along ``advance_dir`` (mm)."""
    return float((cur.centroid() - prev.centroid()) @ np.asarray(advance_dir, dtype=float))


def write_profile_csv(profile, path):
    p = profile.points
    n = profile.normals
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["idx", "valid", "z_mm", "x_mm", "y_mm", "z_world_mm", "nx", "ny", "nz"])
        for i in range(len(profile.valid)):
            w.writerow([i, int(profile.valid[i]), repr(float(profile.z[i])), *(repr(float(c)) for c in p[i]),
                        *(repr(float(c)) for c in n[i])])
    return path
