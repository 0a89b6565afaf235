"""ASCII PLY reading and writing for labeled point clouds.

Vertices carry ``x y z`` as 64-bit reals and, optionally, ``semantic`` and
``instance`` as 32-bit integers. Free-form metadata travels in ``comment``
header lines as ``key value`` pairs.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_INT_TYPES = {"char", "uchar", "short", "ushort", "int", "uint", "int8", "uint8",
              "int16", "uint16", "int32", "uint32"}


class PlyError(ValueError):
    pass


def write_ply(path, points, semantic=None, instance=None, comments: dict | None = None) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    cols = [pts]
    fmt = ["%.17g"] * 3
    header = ["ply", "format ascii 1.0"]
    for key, value in (comments or {}).items():
        if "\n" in f"{key}{value}":
            raise PlyError("comment values must be single-line")
        header.append(f"comment {key} {value}")
    header += [f"element vertex {n}", "property double x", "property double y",
               "property double z"]
    for name, values in (("semantic", semantic), ("instance", instance)):
        if values is None:
            continue
        values = np.asarray(values).reshape(-1)
        if len(values) != n:
            raise PlyError(f"{name} has {len(values)} entries for {n} points")
        header.append(f"property int {name}")
        # int32 values are exact in float64, so one float table suffices
        cols.append(values.astype(np.int32).astype(np.float64).reshape(-1, 1))
        fmt.append("%d")
    header.append("end_header")
    buf = io.StringIO()
    buf.write("\n".join(header) + "\n")
    if n:
        np.savetxt(buf, np.hstack(cols), fmt=fmt, delimiter=" ")
    Path(path).write_text(buf.getvalue())


def read_ply(path):
    """Read an ASCII PLY file.

    Returns:
        Tuple ``(points, properties, comments)``: an (N, 3) float array, a dict
        of any extra vertex properties (integer columns as int64), and the
        header comments as a dict.
    """
    text = Path(path).read_text()
    head, sep, body = text.partition("end_header\n")
    if not sep:
        raise PlyError(f"{path}: missing end_header")
    lines = head.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError(f"{path}: not a PLY file")
    comments: dict[str, str] = {}
    props: list[tuple[str, str]] = []
    count = None
    in_vertex = False
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise PlyError(f"{path}: only ASCII PLY is supported")
        elif parts[0] == "comment":
            if len(parts) >= 2:
                comments[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif int(parts[2]) != 0:
                raise PlyError(f"{path}: unsupported element {parts[1]!r}")
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise PlyError(f"{path}: list properties are not supported")
            props.append((parts[2], parts[1]))
    if count is None:
        raise PlyError(f"{path}: no vertex element")
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"{path}: missing property {axis}")
    if count == 0:
        data = np.zeros((0, len(props)))
    else:
        data = np.loadtxt(io.StringIO(body), dtype=np.float64, ndmin=2, max_rows=count)
        if data.shape != (count, len(props)):
            raise PlyError(f"{path}: expected {count} vertices with {len(props)} "
                           f"properties, found {data.shape}")
    points = data[:, [names.index("x"), names.index("y"), names.index("z")]].copy()
    extra = {}
    for j, (name, kind) in enumerate(props):
        if name in "xyz":
            continue
        col = data[:, j]
        extra[name] = col.astype(np.int64) if kind in _INT_TYPES else col.copy()
    return points, extra, comments
