"""Minimal PLY reader/writer (ascii, binary little/big endian).

Elements are returned as ``{name: {prop: ndarray}}``.  List properties are
returned as a 2-D array when every row has the same length, otherwise as a
list of 1-D arrays.
"""
import numpy as np

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int",
          "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    pass


def _parse_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyError("not a PLY file (missing magic)")
    fmt = None
    elements = []
    comments = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unexpected end of header")
        parts = line.decode("ascii", errors="replace").split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            fmt = parts[1]
        elif key == "comment":
            comments.append(line.decode("ascii", errors="replace")[len("comment"):].strip())
        elif key == "obj_info":
            continue
        elif key == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif key == "property":
            if not elements:
                raise PlyError("property before element")
            try:
                if parts[1] == "list":
                    elements[-1]["props"].append((parts[4], _TYPES[parts[2]], _TYPES[parts[3]]))
                else:
                    elements[-1]["props"].append((parts[2], None, _TYPES[parts[1]]))
            except (KeyError, IndexError) as exc:
                raise PlyError(f"bad property line: {line!r}") from exc
        elif key == "end_header":
            break
        else:
            raise PlyError(f"unknown header keyword {key!r}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, comments


def _pack_lists(rows):
    if rows and all(len(r) == len(rows[0]) for r in rows):
        return np.array(rows)
    return [np.asarray(r) for r in rows]


def _read_ascii(fh, elements):
    tokens = fh.read().split()
    pos = 0
    out = {}
    for el in elements:
        data = {name: [] for name, _, _ in el["props"]}
        for _ in range(el["count"]):
            for name, count_t, t in el["props"]:
                if count_t is None:
                    data[name].append(tokens[pos])
                    pos += 1
                else:
                    k = int(tokens[pos])
                    data[name].append(tokens[pos + 1: pos + 1 + k])
                    pos += 1 + k
        if pos > len(tokens):
            raise PlyError(f"truncated data in element {el['name']!r}")
        res = {}
        for name, count_t, t in el["props"]:
            try:
                if count_t is None:
                    res[name] = np.array(data[name], dtype=float).astype(t)
                else:
                    res[name] = _pack_lists([np.array(r, dtype=float).astype(t) for r in data[name]])
            except ValueError as exc:
                raise PlyError(f"malformed value in element {el['name']!r}") from exc
        out[el["name"]] = res
    return out


def _read_binary(buf, elements, endian):
    off = 0
    out = {}
    for el in elements:
        props = el["props"]
        n = el["count"]
        if all(c is None for _, c, _ in props):
            dt = np.dtype([(name, endian + t) for name, _, t in props])
            need = dt.itemsize * n
            if off + need > len(buf):
                raise PlyError(f"truncated data in element {el['name']!r}")
            arr = np.frombuffer(buf, dtype=dt, count=n, offset=off)
            off += need
            out[el["name"]] = {name: arr[name].copy() for name, _, _ in props}
            continue
        # fast path: a single list property with constant length (typical faces)
        if len(props) == 1 and n > 0:
            name, ct, t = props[0]
            k = int(np.frombuffer(buf, dtype=endian + ct, count=1, offset=off)[0])
            dt = np.dtype([("n", endian + ct), ("v", endian + t, (k,))])
            if off + dt.itemsize * n <= len(buf):
                arr = np.frombuffer(buf, dtype=dt, count=n, offset=off)
                if np.all(arr["n"] == k):
                    off += dt.itemsize * n
                    out[el["name"]] = {name: arr["v"].copy()}
                    continue
        data = {name: [] for name, _, _ in props}
        try:
            for _ in range(n):
                for name, ct, t in props:
                    if ct is None:
                        v = np.frombuffer(buf, dtype=endian + t, count=1, offset=off)[0]
                        off += np.dtype(t).itemsize
                        data[name].append(v)
                    else:
                        k = int(np.frombuffer(buf, dtype=endian + ct, count=1, offset=off)[0])
                        off += np.dtype(ct).itemsize
                        v = np.frombuffer(buf, dtype=endian + t, count=k, offset=off)
                        off += np.dtype(t).itemsize * k
                        data[name].append(v.copy())
        except ValueError as exc:
            raise PlyError(f"truncated data in element {el['name']!r}") from exc
        out[el["name"]] = {
            name: (np.array(data[name], dtype=t) if ct is None else _pack_lists(data[name]))
            for name, ct, t in props
        }
    return out


def read_ply(path):
    """Return ``(elements, comments)`` for the PLY file at ``path``."""
    with open(path, "rb") as fh:
        fmt, elements, comments = _parse_header(fh)
        if fmt == "ascii":
            data = _read_ascii(fh, elements)
        else:
            data = _read_binary(fh.read(), elements, "<" if fmt == "binary_little_endian" else ">")
    return data, comments


def write_ply(path, elements, binary=True, comments=()):
    """Write elements given as ``[(name, {prop: array})]``.

    1-D arrays become scalar properties, 2-D arrays become list properties
    with a ``uchar`` count.
    """
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0"]
    header += [f"comment {c}" for c in comments]
    for name, props in elements:
        n = len(next(iter(props.values()))) if props else 0
        header.append(f"element {name} {n}")
        for pname, arr in props.items():
            arr = np.asarray(arr)
            tname = _NAMES[arr.dtype.str[1:]]
            if arr.ndim == 1:
                header.append(f"property {tname} {pname}")
            else:
                header.append(f"property list uchar {tname} {pname}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for name, props in elements:
            arrays = [np.asarray(a) for a in props.values()]
            if not arrays or len(arrays[0]) == 0:
                continue
            n = len(arrays[0])
            if binary:
                fields = []
                for i, a in enumerate(arrays):
                    t = "<" + a.dtype.str[1:]
                    if a.ndim == 1:
                        fields.append((f"p{i}", t))
                    else:
                        fields.append((f"n{i}", "u1"))
                        fields.append((f"p{i}", t, (a.shape[1],)))
                rec = np.empty(n, dtype=fields)
                for i, a in enumerate(arrays):
                    rec[f"p{i}"] = a
                    if a.ndim == 2:
                        rec[f"n{i}"] = a.shape[1]
                fh.write(rec.tobytes())
            else:
                lines = []
                for r in range(n):
                    toks = []
                    for a in arrays:
                        if a.ndim == 1:
                            toks.append(_fmt(a[r]))
                        else:
                            toks.append(str(a.shape[1]))
                            toks.extend(_fmt(v) for v in a[r])
                    lines.append(" ".join(toks))
                fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _fmt(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    return str(int(v))
