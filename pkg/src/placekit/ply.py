"""Minimal PLY reader/writer: meshes and point clouds, ASCII or binary little-endian.

Positions are stored as doubles so export/ingest round-trips are lossless;
colors are uchar RGB as is conventional for scan data.
"""

from __future__ import annotations

import io
import numpy as np

from .errors import ParseError
from .geometry import TriangleMesh

_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(data: bytes):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file", offset=0)
    body_start = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype, list_count_dtype|None)])
    offset = 0
    for line in lines:
        offset += len(line) + 1
        tok = line.split()
        if not tok or tok[0] == "comment" or tok[0] == "ply":
            continue
        if tok[0] == "format":
            if tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format {tok[1]}", offset=offset - len(line) - 1)
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", offset=offset - len(line) - 1)
            if tok[1] == "list":
                elements[-1][2].append((tok[4], _DTYPES[tok[3]], _DTYPES[tok[2]]))
            else:
                elements[-1][2].append((tok[2], _DTYPES[tok[1]], None))
    if fmt is None:
        raise ParseError("missing format line", offset=0)
    return fmt, elements, body_start


def _read_elements(data: bytes, fmt: str, elements, body_start: int):
    out = {}
    if fmt == "binary_little_endian":
        pos = body_start
        for name, count, props in elements:
            if any(p[2] is not None for p in props):
                # list properties: assume uniform list length (triangles)
                rows = []
                for i in range(count):
                    row = []
                    for pname, dtype, ldtype in props:
                        if ldtype is not None:
                            n_item = np.dtype(ldtype).itemsize
                            if pos + n_item > len(data):
                                raise ParseError("truncated PLY body", offset=pos)
                            n = int(np.frombuffer(data, dtype="<" + ldtype, count=1, offset=pos)[0])
                            pos += n_item
                            w = np.dtype(dtype).itemsize
                            if pos + n * w > len(data):
                                raise ParseError("truncated PLY body", offset=pos)
                            row.append(np.frombuffer(data, dtype="<" + dtype, count=n, offset=pos))
                            pos += n * w
                        else:
                            w = np.dtype(dtype).itemsize
                            if pos + w > len(data):
                                raise ParseError("truncated PLY body", offset=pos)
                            row.append(np.frombuffer(data, dtype="<" + dtype, count=1, offset=pos))
                            pos += w
                    rows.append(row)
                out[name] = (props, rows)
            else:
                rec = np.dtype([(p[0], "<" + p[1]) for p in props])
                need = rec.itemsize * count
                if pos + need > len(data):
                    raise ParseError("truncated PLY body", offset=pos)
                out[name] = (props, np.frombuffer(data, dtype=rec, count=count, offset=pos))
                pos += need
    else:
        text = data[body_start:].decode("ascii", errors="replace").split()
        cursor = 0
        for name, count, props in elements:
            if any(p[2] is not None for p in props):
                rows = []
                for i in range(count):
                    row = []
                    for pname, dtype, ldtype in props:
                        if ldtype is not None:
                            try:
                                n = int(text[cursor])
                            except (IndexError, ValueError):
                                raise ParseError("truncated PLY body", offset=body_start)
                            cursor += 1
                            row.append(np.array(text[cursor : cursor + n], dtype=dtype))
                            cursor += n
                        else:
                            row.append(np.array(text[cursor : cursor + 1], dtype=dtype))
                            cursor += 1
                    rows.append(row)
                out[name] = (props, rows)
            else:
                n_fields = len(props)
                flat = text[cursor : cursor + count * n_fields]
                if len(flat) < count * n_fields:
                    raise ParseError("truncated PLY body", offset=body_start)
                cursor += count * n_fields
                arr = np.array(flat, dtype=object).reshape(count, n_fields)
                rec = {p[0]: arr[:, k].astype(p[1]) for k, p in enumerate(props)}
                out[name] = (props, rec)
    return out


def _vertex_arrays(out):
    if "vertex" not in out:
        raise ParseError("PLY has no vertex element", offset=0)
    props, rec = out["vertex"]
    names = [p[0] for p in props]
    if not all(k in names for k in ("x", "y", "z")):
        raise ParseError("vertex element lacks x/y/z", offset=0)

    def col(k):
        return np.asarray(rec[k], dtype=np.float64)

    verts = np.column_stack([col("x"), col("y"), col("z")])
    colors = None
    if all(k in names for k in ("red", "green", "blue")):
        colors = np.column_stack([col("red"), col("green"), col("blue")]) / 255.0
    return verts, colors


def read_mesh(source) -> TriangleMesh:
    """Read a triangle mesh from a path, bytes, or file-like object."""
    data = _as_bytes(source)
    fmt, elements, body = _parse_header(data)
    out = _read_elements(data, fmt, elements, body)
    verts, colors = _vertex_arrays(out)
    if "face" not in out:
        raise ParseError("PLY has no face element", offset=0)
    _, rows = out["face"]
    tris = []
    for row in rows:
        idx = np.concatenate([np.asarray(r).ravel() for r in row]).astype(np.int64)
        if len(idx) == 3:
            tris.append(idx)
        elif len(idx) == 4:  # fan-triangulate quads
            tris.append(idx[[0, 1, 2]])
            tris.append(idx[[0, 2, 3]])
        else:
            raise ParseError(f"unsupported face arity {len(idx)}", offset=body)
    return TriangleMesh(verts, np.array(tris, dtype=np.int64), colors)


def read_points(source):
    """Read a point cloud: (positions (N,3), colors (N,3) or None)."""
    data = _as_bytes(source)
    fmt, elements, body = _parse_header(data)
    out = _read_elements(data, fmt, elements, body)
    return _vertex_arrays(out)


def _as_bytes(source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, io.IOBase):
        return source.read()
    with open(source, "rb") as f:
        return f.read()


def _color_bytes(colors: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)


def write_mesh(path, mesh: TriangleMesh, ascii_format: bool = False) -> None:
    has_color = mesh.colors is not None
    header = ["ply", f"format {'ascii' if ascii_format else 'binary_little_endian'} 1.0",
              f"element vertex {mesh.num_vertices}",
              "property double x", "property double y", "property double z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.num_triangles}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii_format:
            cols = _color_bytes(mesh.colors) if has_color else None
            for i, v in enumerate(mesh.vertices):
                row = f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}"
                if has_color:
                    row += f" {cols[i][0]} {cols[i][1]} {cols[i][2]}"
                f.write((row + "\n").encode("ascii"))
            for t in mesh.triangles:
                f.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))
        else:
            if has_color:
                rec = np.zeros(mesh.num_vertices,
                               dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                                      ("r", "u1"), ("g", "u1"), ("b", "u1")])
                cols = _color_bytes(mesh.colors)
                rec["r"], rec["g"], rec["b"] = cols[:, 0], cols[:, 1], cols[:, 2]
            else:
                rec = np.zeros(mesh.num_vertices, dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
            rec["x"], rec["y"], rec["z"] = mesh.vertices.T
            f.write(rec.tobytes())
            face = np.zeros(mesh.num_triangles, dtype=[("n", "u1"), ("i", "<i4", 3)])
            face["n"] = 3
            face["i"] = mesh.triangles.astype(np.int32)
            f.write(face.tobytes())


def write_points(path, positions: np.ndarray, colors: np.ndarray | None = None) -> None:
    positions = np.asarray(positions, dtype=np.float64)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(positions)}",
              "property double x", "property double y", "property double z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if colors is not None:
            rec = np.zeros(len(positions),
                           dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                                  ("r", "u1"), ("g", "u1"), ("b", "u1")])
            cb = _color_bytes(colors)
            rec["r"], rec["g"], rec["b"] = cb[:, 0], cb[:, 1], cb[:, 2]
        else:
            rec = np.zeros(len(positions), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
        rec["x"], rec["y"], rec["z"] = positions.T
        f.write(rec.tobytes())
