"""Reading point clouds (XYZ, PLY) and writing meshes (OBJ, PLY)."""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from .geometry import Mesh

__all__ = ["read_points", "read_mesh", "read_ply", "write_mesh", "write_points_ply", "write_xyz"]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    fmt, elements = None, []
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("PLY header is not terminated")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise ValueError("PLY property before any element")
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]], None, None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> dict[str, dict[str, np.ndarray | list]]:
    """Parse an ascii or little-endian binary PLY into ``{element: {property: values}}``."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        data = {}
        if fmt == "ascii":
            tokens = iter(fh.read().split())
            for el in elements:
                cols = {name: [] for name, *_ in el["props"]}
                for _ in range(el["count"]):
                    for name, kind, count_t, item_t in el["props"]:
                        if kind == "list":
                            k = int(next(tokens))
                            cols[name].append([float(next(tokens)) for _ in range(k)])
                        else:
                            cols[name].append(float(next(tokens)))
                data[el["name"]] = cols
        else:
            buf = fh.read()
            off = 0
            for el in elements:
                props = el["props"]
                if all(kind != "list" for _, kind, _, _ in props):
                    dt = np.dtype([(name, "<" + kind) for name, kind, _, _ in props])
                    arr = np.frombuffer(buf, dtype=dt, count=el["count"], offset=off)
                    off += dt.itemsize * el["count"]
                    data[el["name"]] = {name: arr[name].astype(float) for name, *_ in props}
                    continue
                cols = {name: [] for name, *_ in props}
                for _ in range(el["count"]):
                    for name, kind, count_t, item_t in props:
                        if kind == "list":
                            k = int(np.frombuffer(buf, "<" + count_t, 1, off)[0])
                            off += np.dtype(count_t).itemsize
                            cols[name].append(np.frombuffer(buf, "<" + item_t, k, off).tolist())
                            off += k * np.dtype(item_t).itemsize
                        else:
                            cols[name].append(float(np.frombuffer(buf, "<" + kind, 1, off)[0]))
                            off += np.dtype(kind).itemsize
                data[el["name"]] = cols
    return data


def _vertices(ply) -> np.ndarray:
    v = ply.get("vertex")
    if v is None or not all(k in v for k in "xyz"):
        raise ValueError("PLY file has no vertex x/y/z properties")
    return np.stack([np.asarray(v[k], dtype=float) for k in "xyz"], 1).reshape(-1, 3)


def read_points(path) -> np.ndarray:
    """Load an ``(N, 3)`` point cloud from ``.xyz`` (whitespace columns) or ``.ply``."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        pts = _vertices(read_ply(path))
    elif suffix in (".xyz", ".txt", ".pts"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # empty files are reported below
            pts = np.loadtxt(path, dtype=float, ndmin=2, comments="#")
        if pts.size == 0:
            raise ValueError(f"{path}: no points")
        if pts.shape[1] < 3:
            raise ValueError(f"{path}: expected at least 3 columns")
        pts = pts[:, :3]
    elif suffix == ".obj":
        pts = read_mesh(path).vertices
    else:
        raise ValueError(f"unsupported point cloud format {suffix!r}")
    if len(pts) == 0:
        raise ValueError(f"{path}: no points")
    return pts


def read_mesh(path) -> Mesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        ply = read_ply(path)
        verts = _vertices(ply)
        face = ply.get("face", {})
        lists = face.get("vertex_indices", face.get("vertex_index", []))
        faces = _triangulate(lists)
        return Mesh(verts, faces)
    if suffix == ".obj":
        verts, polys = [], []
        with open(path) as fh:
            for line in fh:
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "v":
                    verts.append([float(t) for t in tok[1:4]])
                elif tok[0] == "f":
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                    polys.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        return Mesh(np.asarray(verts, dtype=float).reshape(-1, 3), _triangulate(polys))
    raise ValueError(f"unsupported mesh format {suffix!r}")


def _triangulate(polys) -> np.ndarray:
    tris = []
    for p in polys:
        p = [int(i) for i in p]
        tris.extend([p[0], p[i], p[i + 1]] for i in range(1, len(p) - 1))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def write_mesh(path, mesh: Mesh) -> None:
    """Write ``.obj`` or binary ``.ply`` depending on the suffix."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for f in mesh.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    elif suffix == ".ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(mesh.vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(mesh.faces)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        fdt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        faces = np.empty(len(mesh.faces), dtype=fdt)
        faces["n"] = 3
        faces["idx"] = mesh.faces
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.asarray(mesh.vertices, dtype="<f4").tobytes())
            fh.write(faces.tobytes())
    else:
        raise ValueError(f"unsupported mesh format {suffix!r}")


def write_points_ply(path, pts, colors=None) -> None:
    """Ascii PLY point set, optionally with per-vertex uchar colours."""
    pts = np.asarray(pts, dtype=float)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i, p in enumerate(pts):
            row = f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g}"
            if colors is not None:
                c = colors[i]
                row += f" {int(c[0])} {int(c[1])} {int(c[2])}"
            fh.write(row + "\n")


def write_xyz(path, pts) -> None:
    np.savetxt(path, np.asarray(pts, dtype=float), fmt="%.9g")
