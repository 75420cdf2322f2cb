"""Argument checks shared by the estimator and the planner front ends."""
import numbers

import numpy as np

from .mesh import TriangleMesh


def check_mesh(X, name="X"):
    if not isinstance(X, TriangleMesh):
        raise TypeError(f"{name} must be a TriangleMesh, got {type(X).__name__}")
    if X.n_triangles == 0:
        raise ValueError(f"{name} has no triangles")
    if not np.all(np.isfinite(X.vertices)):
        raise ValueError(f"{name} has non-finite vertices")
    return X


def check_positive(value, name, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not value > 0:
        raise ValueError(f"{name} must be a positive number, got {value!r}")
    return float(value)


def check_fraction(value, name, closed_high=False):
    ok = isinstance(value, numbers.Real) and not isinstance(value, bool)
    if ok:
        ok = 0 <= value <= 1 if closed_high else 0 <= value < 1
    if not ok:
        raise ValueError(f"{name} must lie in [0, 1{']' if closed_high else ')'}, got {value!r}")
    return float(value)


def check_direction(value, name="advance_dir"):
    v = np.asarray(value, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be three finite numbers")
    h = v.copy()
    h[2] = 0.0
    if np.linalg.norm(h) < 1e-12:
        raise ValueError(f"{name} must have a horizontal component")
    return h / np.linalg.norm(h)


def check_seed(value, name="seed"):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 0:
        raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
    return int(value)
