"""Trajectory replay, error maps, metrics and point-cloud export."""
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image, PngImagePlugin

from .env import _measure
from .plyio import read_ply, write_ply
from .sensor import add_noise, simulate_profile

CLOUD_COLUMNS = ["x", "y", "z", "distance_error", "orientation_error", "pass_id", "profile_id"]
BACKGROUND = (40, 40, 40)


class EmptyMapError(ValueError):
    pass


class ProvenanceError(ValueError):
    pass


@dataclass
class ErrorMap:
    """Per-point errors plus per-profile measurements from one replay."""

    points: np.ndarray
    distance_error: np.ndarray
    orientation_error: np.ndarray
    pass_id: np.ndarray
    profile_id: np.ndarray
    profile_D: np.ndarray
    profile_alpha: np.ndarray
    profile_valid: np.ndarray
    profile_pass: np.ndarray
    profile_ds: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.points)
        if not all(len(a) == n for a in (self.distance_error, self.orientation_error, self.pass_id, self.profile_id)):
            raise ValueError("per-point arrays have inconsistent lengths")
        p = len(self.profile_D)
        if not all(len(a) == p for a in (self.profile_alpha, self.profile_valid, self.profile_pass, self.profile_ds)):
            raise ValueError("per-profile arrays have inconsistent lengths")

    @property
    def n_points(self):
        return len(self.points)

    @property
    def n_profiles(self):
        return len(self.profile_D)

    def channel(self, name):
        if name == "distance":
            return self.distance_error
        if name == "orientation":
            return self.orientation_error
        raise ValueError(f"unknown channel {name!r}")


def replay(accel, spec, traj, seed=0, noise=True, working_distance=None):
    """Simulate a profile at every capture pose and collect errors.

    Spacing is measured against the last valid centroid within the same pass,
    mirroring the environment's bookkeeping.
    """
    wd = spec.working_distance if working_distance is None else working_distance
    rng = np.random.default_rng(seed)
    pts, derr, oerr, pid, prid = [], [], [], [], []
    pD, pa, pv, pp, pds = [], [], [], [], []
    last = {}
    dirs = {}
    for i in np.nonzero(traj.capture)[0]:
        pose = traj.pose(i)
        prof = simulate_profile(accel, pose, spec)
        if noise:
            prof = add_noise(prof, spec, rng)
        D, alpha, dv, av = _measure(prof)
        k = len(pD)
        pas = int(traj.pass_id[i])
        if pas not in dirs:
            dirs[pas] = traj.advance_dir(pas)
        ds = np.nan
        if dv:
            c = prof.centroid()
            if pas in last:
                ds = float((c - last[pas]) @ dirs[pas])
            last[pas] = c
            v = prof.valid
            m = int(np.count_nonzero(v))
            pts.append(prof.points[v])
            derr.append(prof.z[v] - wd)
            oerr.append(np.full(m, alpha if av else np.nan))
            pid.append(np.full(m, pas))
            prid.append(np.full(m, k))
        pD.append(D)
        pa.append(alpha)
        pv.append(dv and av)
        pp.append(pas)
        pds.append(ds)

    def cat(parts, shape=(0,), dtype=float):
        return np.concatenate(parts) if parts else np.zeros(shape, dtype=dtype)

    meta = {k: traj.meta[k] for k in ("mesh_digest", "config_digest", "seed", "kind") if k in traj.meta}
    meta["replay_seed"] = int(seed)
    meta["noise"] = bool(noise)
    return ErrorMap(
        cat(pts, (0, 3)), cat(derr), cat(oerr), cat(pid, dtype=np.int64).astype(np.int64),
        cat(prid, dtype=np.int64).astype(np.int64),
        np.array(pD, dtype=float), np.array(pa, dtype=float), np.array(pv, dtype=bool),
        np.array(pp, dtype=np.int64), np.array(pds, dtype=float), meta,
    )


@dataclass
class MetricsReport:
    n_points: int
    n_profiles: int
    n_valid_profiles: int
    mean_abs_distance_error: float
    max_abs_distance_error: float
    rms_distance_error: float
    mean_abs_profile_distance_error: float
    mean_abs_alpha: float
    in_range_fraction: float
    ds_mean: float
    ds_std: float
    ds_within_fraction: float
    per_pass: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(_finite(self.to_dict()), sort_keys=True, indent=1) + "\n"


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def _mean(a):
    return float(np.mean(a)) if len(a) else float("nan")


def _stats(emap, spec, ds_opt, pts_mask, prof_mask):
    d = emap.distance_error[pts_mask]
    valid = emap.profile_valid & prof_mask
    D = emap.profile_D[valid]
    ds = emap.profile_ds[prof_mask]
    ds = ds[np.isfinite(ds)]
    n_prof = int(np.count_nonzero(prof_mask))
    in_range = np.abs(D - spec.working_distance) <= spec.z_range / 2
    return dict(
        n_points=int(len(d)),
        n_profiles=n_prof,
        n_valid_profiles=int(np.count_nonzero(valid)),
        mean_abs_distance_error=_mean(np.abs(d)),
        max_abs_distance_error=float(np.max(np.abs(d))) if len(d) else float("nan"),
        rms_distance_error=float(np.sqrt(np.mean(d ** 2))) if len(d) else float("nan"),
        mean_abs_profile_distance_error=_mean(np.abs(D - spec.working_distance)),
        mean_abs_alpha=_mean(np.abs(emap.profile_alpha[valid])),
        in_range_fraction=float(np.count_nonzero(in_range)) / n_prof if n_prof else 0.0,
        ds_mean=_mean(ds),
        ds_std=float(np.std(ds)) if len(ds) else float("nan"),
        ds_within_fraction=float(np.count_nonzero(np.abs(ds - ds_opt) <= 0.5 * ds_opt)) / len(ds) if len(ds) else 0.0,
    )


def spec_digest(spec):
    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def summarize(emap, spec, ds_opt):
    if emap.n_profiles == 0:
        raise EmptyMapError("error map has no profiles")
    all_pts = np.ones(emap.n_points, dtype=bool)
    all_prof = np.ones(emap.n_profiles, dtype=bool)
    per_pass = {}
    for p in sorted(set(emap.profile_pass.tolist())):
        per_pass[str(p)] = _stats(emap, spec, ds_opt, emap.pass_id == p, emap.profile_pass == p)
    prov = dict(emap.meta)
    prov["sensor_digest"] = spec_digest(spec)
    return MetricsReport(**_stats(emap, spec, ds_opt, all_pts, all_prof), per_pass=per_pass, provenance=prov)


# metric -> True when lower is better
COMPARED = {
    "mean_abs_distance_error": True,
    "max_abs_distance_error": True,
    "rms_distance_error": True,
    "mean_abs_profile_distance_error": True,
    "mean_abs_alpha": True,
    "in_range_fraction": False,
    "ds_within_fraction": False,
}


def compare(rl, baseline, override=False):
    """Side-by-side rows ``(metric, rl, baseline, delta, rl_better)``."""
    for key in ("mesh_digest", "sensor_digest"):
        a, b = rl.provenance.get(key), baseline.provenance.get(key)
        if a != b and not override:
            raise ProvenanceError(f"{key} differs: {a} vs {b}")
    rows = []
    for name, lower in COMPARED.items():
        a, b = getattr(rl, name), getattr(baseline, name)
        better = bool(a < b) if lower else bool(a > b)
        rows.append((name, a, b, a - b, better))
    return rows


def relative_reduction(rl_value, baseline_value):
    return (baseline_value - rl_value) / baseline_value if baseline_value else 0.0


def format_comparison(rows):
    out = [f"{'metric':<34}{'rl':>14}{'baseline':>14}{'delta':>14}  rl_better"]
    for name, a, b, d, v in rows:
        out.append(f"{name:<34}{a:>14.6g}{b:>14.6g}{d:>14.6g}  {v}")
    return "\n".join(out)


def write_comparison_csv(rows, path, meta=None):
    with open(path, "w", newline="") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["metric", "rl", "baseline", "delta", "rl_better"])
        for name, a, b, d, v in rows:
            w.writerow([name, repr(float(a)), repr(float(b)), repr(float(d)), int(v)])
    return path


def _cloud_columns(emap):
    return {
        "x": emap.points[:, 0].astype(np.float64),
        "y": emap.points[:, 1].astype(np.float64),
        "z": emap.points[:, 2].astype(np.float64),
        "distance_error": emap.distance_error.astype(np.float64),
        "orientation_error": emap.orientation_error.astype(np.float64),
        "pass_id": emap.pass_id.astype(np.int32),
        "profile_id": emap.profile_id.astype(np.int32),
    }


def export_pointcloud(emap, path, format=None):
    """Write the per-point map as PLY (``ply``/``ply-ascii``) or ``csv``."""
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "ply")
    cols = _cloud_columns(emap)
    if fmt in ("ply", "ply-ascii"):
        comments = ["profiscan point cloud", "meta " + json.dumps(emap.meta, sort_keys=True)]
        write_ply(path, [("vertex", cols)], binary=fmt == "ply", comments=comments)
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CLOUD_COLUMNS)
            arrs = [cols[c] for c in CLOUD_COLUMNS]
            for r in range(emap.n_points):
                w.writerow([repr(float(a[r])) if a.dtype.kind == "f" else int(a[r]) for a in arrs])
    else:
        raise ValueError(f"unknown point-cloud format {fmt!r}")
    return path


def read_pointcloud(path):
    """Read a file written by :func:`export_pointcloud` into a column dict."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != CLOUD_COLUMNS:
            raise ValueError("point-cloud CSV header mismatch")
        body = np.array(rows[1:], dtype=object).reshape(-1, len(CLOUD_COLUMNS))
        out = {c: body[:, j].astype(float) for j, c in enumerate(CLOUD_COLUMNS[:5])}
        out.update({c: body[:, j].astype(np.int32) for j, c in enumerate(CLOUD_COLUMNS) if j >= 5})
        return out
    data, _ = read_ply(path)
    return dict(data["vertex"])


def render_error_map(emap, out_path, channel="distance", limit=None, size=(800, 600), spec=None,
                     alpha_max=30.0, cmap="RdBu_r", meta=None):
    """Top-view raster of one error channel with a colorbar strip along the bottom.

    Colours are normalized to ``±limit``; the default is ``±z_range/2`` for
    distance and ``±alpha_max`` for orientation.  Values beyond clamp to the
    end colours.
    """
    if emap.n_points == 0:
        raise EmptyMapError("nothing to render")
    if limit is None:
        if channel == "distance":
            if spec is None:
                raise ValueError("spec is required for the default distance limit")
            limit = spec.z_range / 2
        else:
            limit = alpha_max
    w, h = int(size[0]), int(size[1])
    bar = max(6, h // 12)
    gap = max(2, h // 60)
    plot_h = h - bar - 2 * gap
    if w < 8 or plot_h < 8:
        raise ValueError("image too small")
    lut = (colormaps[cmap](np.linspace(0.0, 1.0, 256))[:, :3] * 255).round().astype(np.uint8)
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND

    vals = emap.channel(channel)
    ok = np.isfinite(vals)
    xy = emap.points[ok, :2]
    vals = vals[ok]
    if len(vals):
        lo = xy.min(axis=0)
        span = np.maximum(xy.max(axis=0) - lo, 1e-9)
        m = 4
        s = min((w - 2 * m - 1) / span[0], (plot_h - 2 * m - 1) / span[1])
        off = np.array([(w - span[0] * s) / 2, (plot_h - span[1] * s) / 2])
        px = np.floor(off[0] + (xy[:, 0] - lo[0]) * s).astype(int)
        py = np.floor(plot_h - 1 - (off[1] + (xy[:, 1] - lo[1]) * s)).astype(int)
        px = np.clip(px, 0, w - 1)
        py = np.clip(py, 0, plot_h - 1)
        idx = np.clip(np.round((np.clip(vals / limit, -1.0, 1.0) + 1.0) * 127.5), 0, 255).astype(int)
        # later points overwrite earlier ones, so draw order is the point order
        img[py, px] = lut[idx]
    ramp = np.round(np.linspace(0, 255, w)).astype(int)
    img[h - bar:, :] = lut[ramp][None, :, :]
    info = PngImagePlugin.PngInfo()
    info.add_text("Description", json.dumps(emap.meta if meta is None else meta, sort_keys=True))
    Image.fromarray(img, "RGB").save(out_path, format="PNG", pnginfo=info)
    return out_path
