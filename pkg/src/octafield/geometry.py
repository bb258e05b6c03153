"""Point-cloud normalisation, iso-surface extraction and mesh metrics."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Normalization",
    "normalize",
    "Mesh",
    "marching_cubes",
    "extract_mesh",
    "sample_mesh",
    "nearest_distances",
    "chamfer",
    "hausdorff",
    "fscore",
    "MetricReport",
    "evaluate",
    "dirichlet_knn",
    "default_tau",
]

PADDING = 0.05


@dataclass(frozen=True)
class Normalization:
    """Maps world coordinates into the cube used for training: ``x_n = (x - center) / scale``."""

    center: np.ndarray
    scale: float

    def apply(self, pts):
        return (np.asarray(pts, dtype=float) - self.center) / self.scale

    def invert(self, pts):
        return np.asarray(pts, dtype=float) * self.scale + self.center

    def to_dict(self):
        return {"center": [float(c) for c in self.center], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["center"], dtype=float), float(d["scale"]))


def normalize(pts, padding: float = PADDING) -> tuple[np.ndarray, Normalization]:
    """Centre the bounding box and scale its longest edge to ``2 * (1 - padding)``."""
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"expected a non-empty (N, 3) array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    lo, hi = pts.min(0), pts.max(0)
    center = 0.5 * (lo + hi)
    extent = float((hi - lo).max())
    scale = extent / (2.0 * (1.0 - padding)) if extent > 0 else 1.0
    tr = Normalization(center, scale)
    return tr.apply(pts), tr


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float
    faces: np.ndarray  # (F, 3) int

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def transformed(self, tr: Normalization) -> "Mesh":
        return Mesh(tr.invert(self.vertices), self.faces.copy())

    def is_manifold(self) -> bool:
        """True when every edge is shared by exactly two faces."""
        if len(self.faces) == 0:
            return False
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def _weld(verts, faces, decimals=12):
    """Merge duplicate vertices and drop faces that collapse."""
    key = np.round(verts, decimals)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    faces = inv[faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    # average the positions of merged vertices (they agree to `decimals`)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inv, verts)
    counts = np.bincount(inv, minlength=len(uniq))[:, None]
    verts = sums / counts
    used = np.unique(faces)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[faces]


def marching_cubes(volume: np.ndarray, lo=-1.0, hi=1.0, level: float = 0.0) -> Mesh:
    """Zero level set of samples on a regular grid spanning ``[lo, hi]^3``.

    Samples exactly at ``level`` count as negative. Face normals point
    towards increasing values (outwards for an SDF).
    """
    from skimage import measure

    volume = np.asarray(volume, dtype=float)
    res = volume.shape[0]
    if volume.ndim != 3 or len(set(volume.shape)) != 1 or res < 2:
        raise ValueError(f"expected a cubic grid, got shape {volume.shape}")
    if not np.all(np.isfinite(volume)):
        raise ValueError("grid contains non-finite values")
    # nudge exact zeros so the vertex placement never degenerates
    vol = np.where(volume == level, level - 1e-12, volume)
    if vol.min() >= level or vol.max() <= level:
        warnings.warn("field has no sign change on the grid; the mesh is empty", RuntimeWarning)
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    step = (hi - lo) / (res - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=level, spacing=(step,) * 3,
                                                allow_degenerate=False)
    verts = verts + lo
    faces = faces.astype(np.int64)
    verts, faces = _weld(verts, faces)
    return Mesh(verts, faces)


def extract_mesh(f_net, resolution: int, chunk: int = 65536, lo=-1.0, hi=1.0) -> Mesh:
    """Evaluate an SDF network on a ``resolution^3`` grid and run marching cubes."""
    import torch

    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    axis = np.linspace(lo, hi, resolution)
    dtype = next(f_net.parameters()).dtype
    vals = np.empty(resolution ** 3)
    with torch.no_grad():
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        plane = np.stack([gx.ravel(), gy.ravel()], 1)
        out = []
        for z in axis:
            pts = np.concatenate([plane, np.full((len(plane), 1), z)], 1)
            for s in range(0, len(pts), chunk):
                out.append(f_net(torch.tensor(pts[s:s + chunk], dtype=dtype)).double().numpy())
        vals = np.concatenate(out).reshape(resolution, resolution * resolution).T
    vol = vals.reshape(resolution, resolution, resolution)
    return marching_cubes(vol, lo, hi)


def sample_mesh(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    areas = mesh.face_areas()
    total = areas.sum()
    if len(mesh.faces) == 0 or not total > 0:
        raise ValueError("cannot sample a mesh with zero area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(areas), size=n, p=areas / total)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], 1)
    tri = mesh.vertices[mesh.faces[idx]]
    return np.einsum("nk,nkd->nd", w, tri)


def nearest_distances(a, b) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be non-empty")
    return cKDTree(b).query(a, k=1)[0]


def chamfer(a, b, squared: bool = False) -> float:
    """Mean of the two directional mean nearest-neighbour distances (optionally squared)."""
    da, db = nearest_distances(a, b), nearest_distances(b, a)
    if squared:
        da, db = da ** 2, db ** 2
    return 0.5 * (da.mean() + db.mean())


def hausdorff(a, b) -> float:
    return float(max(nearest_distances(a, b).max(), nearest_distances(b, a).max()))


def default_tau(reference) -> float:
    """Half a percent of the bounding-box diagonal of ``reference``."""
    ref = np.asarray(reference, dtype=float)
    return 0.005 * float(np.linalg.norm(ref.max(0) - ref.min(0)))


def fscore(a, b, tau: float | None = None) -> float:
    """F-score in percent of reconstruction ``a`` against reference ``b``."""
    if tau is None:
        tau = default_tau(b)
    precision = float(np.mean(nearest_distances(a, b) <= tau))
    recall = float(np.mean(nearest_distances(b, a) <= tau))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


@dataclass
class MetricReport:
    chamfer_x1e3: float
    hausdorff_x1e2: float
    fscore_pct: float
    tau: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(a, b, tau: float | None = None) -> MetricReport:
    """Metrics between two point samples (``a`` reconstruction, ``b`` reference)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if tau is None:
        tau = default_tau(b)
    da, db = nearest_distances(a, b), nearest_distances(b, a)
    ch = 0.5 * (da.mean() + db.mean())
    hd = max(da.max(), db.max())
    p, r = float(np.mean(da <= tau)), float(np.mean(db <= tau))
    fs = 0.0 if p + r == 0 else 100.0 * 2 * p * r / (p + r)
    return MetricReport(float(ch * 1e3), float(hd * 1e2), float(fs), float(tau), int(min(len(a), len(b))))


def dirichlet_knn(values, pts, k: int = 8) -> float:
    """Graph Dirichlet energy ``sum_i sum_{j in knn(i)} |q_i - q_j|^2``."""
    values, pts = np.asarray(values, dtype=float), np.asarray(pts, dtype=float)
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    diff = values[:, None, :] - values[idx[:, 1:]]
    return float((diff ** 2).sum())
