"""Nearest-hit ray casting against a triangle mesh through a BVH.

Triangle tests use the watertight formulation of Woop, Benthin and Wald
(shear into ray space, signed edge functions), in float64.  Ties on ``t``
resolve to the lowest triangle index so results are independent of
traversal order.
"""
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .mesh import MeshError, TriangleMesh

LEAF_SIZE = 4
DIR_TOL = 1e-9


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > DIR_TOL:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray
    tri_id: int


class AccelStructure:
    """Flattened BVH over a mesh.  Immutable; safe for concurrent queries."""

    def __init__(self, mesh, node_min, node_max, node_left, node_start, node_count, order):
        self.mesh = mesh
        self.node_min = node_min
        self.node_max = node_max
        self.node_left = node_left
        self.node_start = node_start
        self.node_count = node_count
        self.order = order
        f = mesh.triangles[order]
        v = mesh.vertices
        self.v0 = np.ascontiguousarray(v[f[:, 0]])
        self.v1 = np.ascontiguousarray(v[f[:, 1]])
        self.v2 = np.ascontiguousarray(v[f[:, 2]])
        for a in (node_min, node_max, node_left, node_start, node_count, order, self.v0, self.v1, self.v2):
            a.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.node_count)


def build_accel(mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> AccelStructure:
    """Median-split BVH on triangle centroids along the widest centroid axis."""
    if not isinstance(mesh, TriangleMesh) or mesh.n_triangles == 0:
        raise MeshError("cannot build an acceleration structure for an empty mesh")
    tri = mesh.vertices[mesh.triangles]
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    cen = tri.mean(axis=1)
    order = np.arange(mesh.n_triangles)
    node_min, node_max, node_left, node_start, node_count = [], [], [], [], []

    def new_node():
        node_min.append(None)
        node_max.append(None)
        node_left.append(-1)
        node_start.append(0)
        node_count.append(0)
        return len(node_count) - 1

    root = new_node()
    stack = [(root, 0, mesh.n_triangles)]
    while stack:
        node, start, end = stack.pop()
        idx = order[start:end]
        bmin = lo[idx].min(axis=0)
        bmax = hi[idx].max(axis=0)
        pad = 1e-9 * (np.abs(bmin) + np.abs(bmax) + 1.0)
        node_min[node] = bmin - pad
        node_max[node] = bmax + pad
        n = end - start
        if n <= leaf_size:
            node_start[node] = start
            node_count[node] = n
            continue
        c = cen[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps the build deterministic for equal centroids
        perm = np.argsort(c[:, axis], kind="stable")
        order[start:end] = idx[perm]
        mid = start + n // 2
        left = new_node()
        right = new_node()
        assert right == left + 1
        node_left[node] = left
        stack.append((right, mid, end))
        stack.append((left, start, mid))
    return AccelStructure(
        mesh,
        np.ascontiguousarray(np.array(node_min)),
        np.ascontiguousarray(np.array(node_max)),
        np.array(node_left, dtype=np.int64),
        np.array(node_start, dtype=np.int64),
        np.array(node_count, dtype=np.int64),
        order.astype(np.int64),
    )


@numba.njit(cache=True, inline="always")
def _ray_setup(d):
    ax = np.abs(d)
    kz = 0
    if ax[1] > ax[kz]:
        kz = 1
    if ax[2] > ax[kz]:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sx = d[kx] / d[kz]
    sy = d[ky] / d[kz]
    sz = 1.0 / d[kz]
    return kx, ky, kz, sx, sy, sz


@numba.njit(cache=True, inline="always")
def _tri_hit(o, kx, ky, kz, sx, sy, sz, a, b, c):
    """Return the hit distance or inf (two-sided)."""
    ax_ = a[kx] - o[kx]
    ay_ = a[ky] - o[ky]
    az_ = a[kz] - o[kz]
    bx_ = b[kx] - o[kx]
    by_ = b[ky] - o[ky]
    bz_ = b[kz] - o[kz]
    cx_ = c[kx] - o[kx]
    cy_ = c[ky] - o[ky]
    cz_ = c[kz] - o[kz]
    Ax = ax_ - sx * az_
    Ay = ay_ - sy * az_
    Bx = bx_ - sx * bz_
    By = by_ - sy * bz_
    Cx = cx_ - sx * cz_
    Cy = cy_ - sy * cz_
    U = Cx * By - Cy * Bx
    V = Ax * Cy - Ay * Cx
    W = Bx * Ay - By * Ax
    if (U < 0.0 or V < 0.0 or W < 0.0) and (U > 0.0 or V > 0.0 or W > 0.0):
        return np.inf
    det = U + V + W
    if det == 0.0:
        return np.inf
    T = U * (sz * az_) + V * (sz * bz_) + W * (sz * cz_)
    t = T / det
    if t > 0.0:
        return t
    return np.inf


@numba.njit(cache=True, inline="always")
def _slab(o, d, inv, lo, hi, t0, t1):
    if d == 0.0:
        if o < lo or o > hi:
            return 1.0, 0.0
        return t0, t1
    ta = (lo - o) * inv
    tb = (hi - o) * inv
    if ta > tb:
        ta, tb = tb, ta
    return max(t0, ta), min(t1, tb)


@numba.njit(cache=True, inline="always")
def _box_entry(ox, oy, oz, dx, dy, dz, ix, iy, iz, node_min, node_max, node, tmax):
    t0, t1 = _slab(ox, dx, ix, node_min[node, 0], node_max[node, 0], 0.0, tmax)
    if t0 > t1:
        return np.inf
    t0, t1 = _slab(oy, dy, iy, node_min[node, 1], node_max[node, 1], t0, t1)
    if t0 > t1:
        return np.inf
    t0, t1 = _slab(oz, dz, iz, node_min[node, 2], node_max[node, 2], t0, t1)
    if t0 > t1:
        return np.inf
    return t0


@numba.njit(cache=True)
def _cast_one(o, d, stack, node_min, node_max, node_left, node_start, node_count, order, v0, v1, v2):
    kx, ky, kz, sx, sy, sz = _ray_setup(d)
    ox, oy, oz = o[0], o[1], o[2]
    dx, dy, dz = d[0], d[1], d[2]
    ix = 1.0 / dx if dx != 0.0 else 0.0
    iy = 1.0 / dy if dy != 0.0 else 0.0
    iz = 1.0 / dz if dz != 0.0 else 0.0
    best_t = np.inf
    best_id = -1
    sp = 0
    if _box_entry(ox, oy, oz, dx, dy, dz, ix, iy, iz, node_min, node_max, 0, np.inf) == np.inf:
        return best_t, best_id
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        cnt = node_count[node]
        if cnt > 0:
            s = node_start[node]
            for i in range(s, s + cnt):
                t = _tri_hit(o, kx, ky, kz, sx, sy, sz, v0[i], v1[i], v2[i])
                tid = order[i]
                if t < best_t or (t == best_t and t < np.inf and tid < best_id):
                    best_t = t
                    best_id = tid
            continue
        left = node_left[node]
        right = left + 1
        # slack keeps boxes whose entry equals best_t (exact ties)
        lim = best_t * (1.0 + 1e-12) if best_t < np.inf else np.inf
        tl = _box_entry(ox, oy, oz, dx, dy, dz, ix, iy, iz, node_min, node_max, left, lim)
        tr = _box_entry(ox, oy, oz, dx, dy, dz, ix, iy, iz, node_min, node_max, right, lim)
        if tl <= tr:
            if tr < np.inf:
                stack[sp] = right
                sp += 1
            if tl < np.inf:
                stack[sp] = left
                sp += 1
        else:
            if tl < np.inf:
                stack[sp] = left
                sp += 1
            if tr < np.inf:
                stack[sp] = right
                sp += 1
    return best_t, best_id


_CHUNK = 256


@numba.njit(cache=True, parallel=True)
def _cast_many(origins, dirs, node_min, node_max, node_left, node_start, node_count, order, v0, v1, v2):
    n = origins.shape[0]
    ts = np.empty(n)
    ids = np.empty(n, dtype=np.int64)
    n_chunks = (n + _CHUNK - 1) // _CHUNK
    for c in numba.prange(n_chunks):
        stack = np.empty(128, dtype=np.int64)
        for r in range(c * _CHUNK, min(n, (c + 1) * _CHUNK)):
            t, i = _cast_one(origins[r], dirs[r], stack, node_min, node_max, node_left, node_start,
                             node_count, order, v0, v1, v2)
            ts[r] = t
            ids[r] = i
    return ts, ids


@numba.njit(cache=True, parallel=True)
def _brute_many(origins, dirs, v0, v1, v2):
    n = origins.shape[0]
    m = v0.shape[0]
    ts = np.empty(n)
    ids = np.empty(n, dtype=np.int64)
    for r in numba.prange(n):
        o = origins[r]
        kx, ky, kz, sx, sy, sz = _ray_setup(dirs[r])
        best_t = np.inf
        best_id = -1
        for i in range(m):
            t = _tri_hit(o, kx, ky, kz, sx, sy, sz, v0[i], v1[i], v2[i])
            if t < best_t:
                best_t = t
                best_id = i
        ts[r] = best_t
        ids[r] = best_id
    return ts, ids


def raycast_many(accel: AccelStructure, origins, directions):
    """Vectorized nearest hits: returns ``(t, tri_id)`` with ``inf``/``-1`` for misses."""
    o = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(directions)))
    d = np.ascontiguousarray(directions, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 3:
        raise ValueError("directions must have shape (n, 3)")
    return _cast_many(o, d, accel.node_min, accel.node_max, accel.node_left, accel.node_start,
                      accel.node_count, accel.order, accel.v0, accel.v1, accel.v2)


def raycast_exhaustive(mesh: TriangleMesh, origins, directions):
    """Same kernel as :func:`raycast_many` but testing every triangle in index order."""
    o = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(directions)))
    d = np.ascontiguousarray(directions, dtype=np.float64)
    f = mesh.triangles
    v = mesh.vertices
    return _brute_many(o, d, np.ascontiguousarray(v[f[:, 0]]), np.ascontiguousarray(v[f[:, 1]]),
                       np.ascontiguousarray(v[f[:, 2]]))


def raycast(accel: AccelStructure, ray: Ray) -> Optional[Hit]:
    t, i = raycast_many(accel, ray.origin[None, :], ray.direction[None, :])
    if i[0] < 0:
        return None
    t = float(t[0])
    return Hit(t, ray.origin + t * ray.direction, accel.mesh.tri_normals[i[0]].copy(), int(i[0]))
