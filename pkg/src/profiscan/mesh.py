"""Triangle meshes: loading, saving and procedural inspection pieces.

All coordinates are millimetres with +Z up.
"""
import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .plyio import PlyError, read_ply, write_ply

MIN_TRIANGLE_AREA = 1e-12
FORMATS = ("stl-binary", "stl-ascii", "obj", "ply")


class MeshError(ValueError):
    """Raised for unreadable, malformed or empty meshes."""


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    tri_normals: np.ndarray
    n_dropped: int = 0
    name: str = field(default="mesh")

    @classmethod
    def from_arrays(cls, vertices, triangles, scale=1.0, name="mesh", reference_normals=None):
        """Validate and build a mesh, dropping degenerate triangles.

        ``reference_normals`` (one per triangle, zeros allowed) flips the
        winding of triangles whose winding normal disagrees with the file.
        """
        v = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64) * float(scale))
        f = np.asarray(triangles)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError("vertices must have shape (n, 3)")
        if f.size == 0:
            raise MeshError("mesh has no triangles")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError("triangles must have shape (m, 3)")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        f = f.astype(np.int64)
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError("triangle index out of range")
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        norm = np.linalg.norm(cross, axis=1)
        keep = 0.5 * norm >= MIN_TRIANGLE_AREA
        n_dropped = int(np.count_nonzero(~keep))
        if n_dropped:
            warnings.warn(f"dropped {n_dropped} degenerate triangle(s)", stacklevel=2)
        if not np.any(keep):
            raise MeshError("mesh contains only degenerate triangles")
        f = f[keep]
        normals = cross[keep] / norm[keep, None]
        if reference_normals is not None:
            ref = np.asarray(reference_normals, dtype=float)[keep]
            flip = np.einsum("ij,ij->i", normals, ref) < 0
            f[flip] = f[flip][:, [0, 2, 1]]
            normals[flip] = -normals[flip]
        for a in (v, f, normals):
            a.setflags(write=False)
        return cls(v, np.ascontiguousarray(f), np.ascontiguousarray(normals), n_dropped, name)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def bounds(self):
        used = self.vertices[np.unique(self.triangles)]
        return used.min(axis=0), used.max(axis=0)

    @property
    def triangle_areas(self):
        v = self.vertices
        f = self.triangles
        return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


def _weld(points):
    """Merge bit-identical vertices; keeps first-occurrence order."""
    uniq, first, inverse = np.unique(points, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return uniq[order], remap[inverse.reshape(-1)]


def _detect_format(path):
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return "obj"
    if suffix == ".ply":
        return "ply"
    if suffix == ".stl":
        size = path.stat().st_size
        with open(path, "rb") as fh:
            head = fh.read(84)
        if len(head) >= 84:
            (n,) = struct.unpack("<I", head[80:84])
            if 84 + 50 * n == size:
                return "stl-binary"
        return "stl-ascii"
    raise MeshError(f"cannot infer mesh format from {path.name!r}")


def _load_stl_binary(path):
    data = path.read_bytes()
    if len(data) < 84:
        raise MeshError("binary STL shorter than its header")
    (n,) = struct.unpack("<I", data[80:84])
    if len(data) < 84 + 50 * n:
        raise MeshError(f"binary STL truncated: expected {n} records")
    rec = np.frombuffer(data, dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("a", "<u2")]),
                        count=n, offset=84)
    pts = rec["v"].reshape(-1, 3).astype(np.float64)
    verts, idx = _weld(pts)
    return verts, idx.reshape(-1, 3), rec["n"].astype(np.float64)


def _load_stl_ascii(path):
    try:
        text = path.read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise MeshError("ASCII STL contains non-ascii bytes") from exc
    tokens = text.split()
    if not tokens or tokens[0] != "solid":
        raise MeshError("ASCII STL must start with 'solid'")
    pts = []
    normals = []
    i = 0
    try:
        while i < len(tokens):
            tok = tokens[i]
            if tok == "facet":
                if tokens[i + 1] != "normal":
                    raise MeshError("expected 'facet normal'")
                normals.append([float(x) for x in tokens[i + 2: i + 5]])
                i += 5
            elif tok == "vertex":
                pts.append([float(x) for x in tokens[i + 1: i + 4]])
                i += 4
            else:
                i += 1
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed ASCII STL record near token {i}") from exc
    if len(pts) != 3 * len(normals):
        raise MeshError("ASCII STL facets must have exactly three vertices")
    if not pts:
        raise MeshError("mesh has no triangles")
    verts, idx = _weld(np.array(pts))
    return verts, idx.reshape(-1, 3), np.array(normals)


def _load_obj(path):
    verts = []
    faces = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError
            elif parts[0] == "f":
                idx = []
                for p in parts[1:]:
                    k = int(p.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                if len(idx) < 3:
                    raise ValueError
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
        except ValueError as exc:
            raise MeshError(f"malformed OBJ record on line {lineno}") from exc
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64), None


def _load_ply(path):
    try:
        data, _ = read_ply(path)
    except PlyError as exc:
        raise MeshError(str(exc)) from exc
    if "vertex" not in data or "face" not in data:
        raise MeshError("PLY mesh needs vertex and face elements")
    vd = data["vertex"]
    verts = np.column_stack([vd["x"], vd["y"], vd["z"]]).astype(np.float64)
    fd = data["face"]
    key = "vertex_indices" if "vertex_indices" in fd else "vertex_index"
    if key not in fd:
        raise MeshError("PLY face element lacks vertex_indices")
    rows = fd[key]
    faces = []
    if isinstance(rows, np.ndarray) and rows.ndim == 2 and rows.shape[1] == 3:
        faces = rows.astype(np.int64)
    else:
        for r in rows:
            for j in range(1, len(r) - 1):
                faces.append([r[0], r[j], r[j + 1]])
        faces = np.array(faces, dtype=np.int64)
    return verts, faces, None


_LOADERS = {"stl-binary": _load_stl_binary, "stl-ascii": _load_stl_ascii, "obj": _load_obj, "ply": _load_ply}


def load_mesh(path, format=None, scale=1.0):
    """Load a triangle mesh; ``format`` is inferred from the file when omitted."""
    path = Path(path)
    if not path.is_file():
        raise MeshError(f"mesh file not found: {path}")
    fmt = format or _detect_format(path)
    if fmt not in _LOADERS:
        raise MeshError(f"unknown mesh format {fmt!r}; expected one of {FORMATS}")
    verts, faces, ref = _LOADERS[fmt](path)
    if len(faces) == 0:
        raise MeshError("mesh has no triangles")
    return TriangleMesh.from_arrays(verts, faces, scale=scale, name=path.stem, reference_normals=ref)


def _xyz(p):
    return " ".join(repr(float(c)) for c in p)


def save_mesh(mesh, path, format="stl-binary"):
    path = Path(path)
    v = mesh.vertices
    f = mesh.triangles
    if format == "stl-binary":
        rec = np.zeros(len(f), dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("a", "<u2")]))
        rec["n"] = mesh.tri_normals
        rec["v"] = v[f]
        with open(path, "wb") as fh:
            fh.write(mesh.name.encode("ascii", "replace")[:80].ljust(80, b"\0"))
            fh.write(struct.pack("<I", len(f)))
            fh.write(rec.tobytes())
    elif format == "stl-ascii":
        lines = [f"solid {mesh.name}"]
        for tri, n in zip(f, mesh.tri_normals):
            lines.append("  facet normal " + _xyz(n))
            lines.append("    outer loop")
            for k in tri:
                p = v[k]
                lines.append("      vertex " + _xyz(p))
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append(f"endsolid {mesh.name}")
        path.write_text("\n".join(lines) + "\n")
    elif format == "obj":
        lines = ["v " + _xyz(p) for p in v]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
        path.write_text("\n".join(lines) + "\n")
    elif format in ("ply", "ply-ascii"):
        write_ply(
            path,
            [("vertex", {"x": v[:, 0], "y": v[:, 1], "z": v[:, 2]}),
             ("face", {"vertex_indices": f.astype(np.int32)})],
            binary=format == "ply",
        )
    else:
        raise MeshError(f"unknown mesh format {format!r}")
    return path


def heightfield_solid(xs, ys, heights, name="heightfield"):
    """Closed solid between z=0 and a height grid ``heights[i, j] = h(xs[i], ys[j])``.

    Returns a mesh with ``2*nx*ny`` vertices and
    ``4*(nx-1)*(ny-1) + 4*(nx-1) + 4*(ny-1)`` triangles.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    h = np.asarray(heights, dtype=float)
    nx, ny = len(xs), len(ys)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    top = np.column_stack([gx.ravel(), gy.ravel(), h.ravel()])
    bot = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)])
    verts = np.vstack([top, bot])
    T = lambda i, j: i * ny + j  # noqa: E731
    B = lambda i, j: nx * ny + i * ny + j  # noqa: E731
    I, J = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    I, J = I.ravel(), J.ravel()
    groups = []
    # (triangles, outward direction)
    groups.append((np.vstack([np.column_stack([T(I, J), T(I + 1, J), T(I + 1, J + 1)]),
                              np.column_stack([T(I, J), T(I + 1, J + 1), T(I, J + 1)])]), [0, 0, 1]))
    groups.append((np.vstack([np.column_stack([B(I, J), B(I + 1, J + 1), B(I + 1, J)]),
                              np.column_stack([B(I, J), B(I, J + 1), B(I + 1, J + 1)])]), [0, 0, -1]))
    i = np.arange(nx - 1)
    for j, sgn in ((0, -1), (ny - 1, 1)):
        groups.append((np.vstack([np.column_stack([T(i, j), B(i, j), B(i + 1, j)]),
                                  np.column_stack([T(i, j), B(i + 1, j), T(i + 1, j)])]), [0, sgn, 0]))
    j = np.arange(ny - 1)
    for i0, sgn in ((0, -1), (nx - 1, 1)):
        groups.append((np.vstack([np.column_stack([T(i0, j), B(i0, j), B(i0, j + 1)]),
                                  np.column_stack([T(i0, j), B(i0, j + 1), T(i0, j + 1)])]), [sgn, 0, 0]))
    faces = []
    for tris, out in groups:
        n = np.cross(verts[tris[:, 1]] - verts[tris[:, 0]], verts[tris[:, 2]] - verts[tris[:, 0]])
        flip = n @ np.asarray(out, dtype=float) < 0
        tris = tris.copy()
        tris[flip] = tris[flip][:, [0, 2, 1]]
        faces.append(tris)
    return TriangleMesh.from_arrays(verts, np.vstack(faces), name=name)


def _check_dims(**dims):
    for k, v in dims.items():
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{k} must be positive, got {v!r}")


def _smooth_step(x0, length, h0, dh, n=16):
    t = np.linspace(0.0, 1.0, n + 1)[1:]
    return x0 + t * length, h0 + dh * 0.5 * (1.0 - np.cos(np.pi * t))


def training_profile(length, height, feature_seed, max_slope_deg=30.0, min_slope_deg=10.0):
    """Polyline ``(xs, hs)`` of the training piece's top surface along its length."""
    rng = np.random.default_rng(feature_seed)
    lo = 0.35 * height
    tan_max = np.tan(np.deg2rad(max_slope_deg))
    xs = [0.0]
    hs = [lo + 0.5 * (height - lo)]
    x = 0.08 * length
    xs.append(x)
    hs.append(hs[0])
    end = length - 0.08 * length
    kinds = ["ramp", "smooth"]
    k = 0
    while x < end - 1e-9:
        remaining = end - x
        seg = min(remaining, rng.uniform(0.06, 0.14) * length)
        kind = kinds[k % 2] if k < 2 else kinds[rng.integers(2)]
        k += 1
        h = hs[-1]
        up_room, down_room = height - h, h - lo
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if (sign > 0 and up_room < 0.25 * (height - lo)) or (sign < 0 and down_room < 0.25 * (height - lo)):
            sign = -sign
        room = up_room if sign > 0 else down_room
        if kind == "ramp":
            slope = np.tan(np.deg2rad(rng.uniform(min_slope_deg, max_slope_deg)))
            run = min(seg, room / slope)
            xs.append(x + run)
            hs.append(h + sign * slope * run)
            if run < seg:
                xs.append(x + seg)
                hs.append(hs[-1])
        else:
            dh = rng.uniform(0.4, 1.0) * room
            # peak slope of the cosine step is dh*pi/(2*run)
            dh = min(dh, seg * 2.0 * tan_max / np.pi * 0.95)
            px, ph = _smooth_step(x, seg, h, sign * dh)
            xs.extend(px)
            hs.extend(ph)
        x += seg
        flat = min(end - x, rng.uniform(0.04, 0.10) * length)
        if flat > 1e-9:
            x += flat
            xs.append(x)
            hs.append(hs[-1])
    xs.append(length)
    hs.append(hs[-1])
    xs = np.array(xs)
    hs = np.array(hs)
    keep = np.concatenate([[True], np.diff(xs) > 1e-9])
    xs, hs = xs[keep], hs[keep]
    xs[-1] = length
    hs = hs + (height - hs.max())
    return xs, hs


def make_training_piece(length=1050.0, width=150.0, height=50.0, feature_seed=0):
    """Procedural training piece: flats, ramps (10-30 deg) and smooth steps.

    The top surface is extruded across the width; the solid spans exactly
    ``[0, length] x [0, width] x [0, height]``.
    """
    _check_dims(length=length, width=width, height=height)
    xs, hs = training_profile(length, height, feature_seed)
    ys = np.array([0.0, float(width)])
    return heightfield_solid(xs, ys, np.repeat(hs[:, None], 2, axis=1), name=f"training_piece_{feature_seed}")


def make_test_piece(length=300.0, width=80.0, height=30.0, seed=1, crown=1.5, spacing=1.0):
    """Curved evaluation piece: gentle ramps and smooth Gaussian bumps with a lateral crown."""
    _check_dims(length=length, width=width, height=height)
    rng = np.random.default_rng(seed)
    nx = max(int(np.ceil(length / spacing)) + 1, 8)
    xs = np.linspace(0.0, length, nx)
    base = np.zeros(nx)
    # one ramp up and one ramp down, smoothed at the corners
    a, b = sorted(rng.uniform(0.2, 0.8, 2) * length)
    slope = np.tan(np.deg2rad(rng.uniform(8.0, 15.0)))
    ramp_len = min(0.15 * length, (b - a) / 2)
    base += slope * (np.clip(xs - a, 0, ramp_len) - np.clip(xs - b, 0, ramp_len))
    n_bumps = 3
    centers = np.linspace(0.2, 0.8, n_bumps) * length + rng.uniform(-0.05, 0.05, n_bumps) * length
    for c in centers:
        s = rng.uniform(0.03, 0.06) * length
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0) * np.tan(np.deg2rad(22.0)) * s * np.sqrt(np.e)
        base += amp * np.exp(-0.5 * ((xs - c) / s) ** 2)
    # keep the first/last 8% flat so passes start and end on level ground
    w = np.clip(np.minimum(xs, length - xs) / (0.08 * length), 0.0, 1.0)
    w = 0.5 - 0.5 * np.cos(np.pi * w)
    base = base * w
    ys = np.linspace(0.0, width, 9)
    lateral = -crown * (2.0 * ys / width - 1.0) ** 2
    grid = base[:, None] + lateral[None, :]
    span = grid.max() - grid.min()
    lo = 0.35 * height
    if span > height - lo:
        grid = grid * ((height - lo) / span)
    grid = grid + (height - grid.max())
    return heightfield_solid(xs, ys, grid, name=f"test_piece_{seed}")
