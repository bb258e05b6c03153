"""Synthetic point clouds with known geometry and the measurements made on them."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Mesh, chamfer, sample_mesh

__all__ = [
    "sphere_cloud",
    "sphere_samples",
    "Crease",
    "crease_cloud",
    "CreaseReport",
    "measure_crease",
    "plane_cloud",
]


def sphere_samples(n: int, radius: float = 1.0, seed: int = 0) -> np.ndarray:
    """Uniform samples on the sphere of ``radius`` about the origin."""
    g = np.random.default_rng(seed).normal(size=(n, 3))
    return radius * g / np.linalg.norm(g, axis=1, keepdims=True)


def sphere_cloud(n: int = 5000, seed: int = 0) -> np.ndarray:
    """Noise-free unit-sphere cloud."""
    return sphere_samples(n, 1.0, seed)


def plane_cloud(n: int = 3000, seed: int = 0, normal=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Square patch of side 1 through the origin; returns the points and the unit normal."""
    nrm = np.asarray(normal, dtype=float)
    nrm = nrm / np.linalg.norm(nrm)
    a = np.cross(nrm, [1.0, 0, 0] if abs(nrm[0]) < 0.9 else [0, 1.0, 0])
    a /= np.linalg.norm(a)
    b = np.cross(nrm, a)
    st = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(n, 2))
    return st[:, :1] * a + st[:, 1:] * b, nrm


@dataclass(frozen=True)
class Crease:
    """Two half-planes of width ``length`` meeting along the y axis at ``angle_deg``.

    Wing A spans ``s * (1, 0, 0)`` and wing B ``s * (cos a, 0, sin a)`` for
    ``s in [0, length]``; both extend over ``y in [-length/2, length/2]``.
    """

    angle_deg: float
    length: float = 1.0

    @property
    def wing_a(self) -> np.ndarray:
        return np.array([1.0, 0.0, 0.0])

    @property
    def wing_b(self) -> np.ndarray:
        a = math.radians(self.angle_deg)
        return np.array([math.cos(a), 0.0, math.sin(a)])

    @property
    def axis(self) -> np.ndarray:
        return np.array([0.0, 1.0, 0.0])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Noise-free points, split evenly between the wings."""
        s = rng.uniform(0.0, self.length, size=n)
        y = rng.uniform(-0.5 * self.length, 0.5 * self.length, size=n)
        wing = np.where(np.arange(n) % 2 == 0, 0, 1)
        dirs = np.where(wing[:, None] == 0, self.wing_a, self.wing_b)
        return s[:, None] * dirs + y[:, None] * self.axis

    def bbox_edge(self) -> float:
        corners = np.array([[0, 0, 0], self.wing_a, self.wing_b]) * self.length
        ext = np.ptp(corners, axis=0)
        ext[1] = self.length
        return float(ext.max())


def crease_cloud(angle_deg: float, n: int = 5000, noise: float = 0.02, seed: int = 0):
    """Noisy crease cloud; ``noise`` is a fraction of the longest bounding-box edge."""
    crease = Crease(angle_deg)
    rng = np.random.default_rng(seed)
    pts = crease.sample(n, rng)
    pts = pts + rng.normal(size=pts.shape) * noise * crease.bbox_edge()
    return pts, crease


@dataclass
class CreaseReport:
    dihedral_deg: float
    crease_chamfer: float
    n_wing_a: int
    n_wing_b: int
    n_crease: int


def _wing_coords(pts, crease: Crease, wing):
    """Position along the wing, across the crease, and signed distance off the wing's plane."""
    d = crease.wing_a if wing == 0 else crease.wing_b
    nrm = np.cross(d, crease.axis)
    return pts @ d, pts @ crease.axis, pts @ nrm


def _fit_wing_direction(pts, crease: Crease) -> np.ndarray:
    """Unit in-plane direction orthogonal to the crease axis, pointing away from the crease."""
    c = pts.mean(0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    nrm = vt[2]
    d = np.cross(crease.axis, nrm)
    d /= np.linalg.norm(d)
    return d if d @ c > 0 else -d


def measure_crease(mesh: Mesh, crease: Crease, band: float = 0.06, wing_range=(0.35, 0.9),
                   crease_radius: float = 0.2, n_samples: int = 200_000, seed: int = 0,
                   coarse_band: float = 0.2) -> CreaseReport:
    """Dihedral angle of plane fits to each wing and Chamfer distance near the crease line.

    All lengths are in the crease's own units. Wing fits use mesh samples
    inside ``wing_range`` along a wing and away from the patch's side edges:
    first those within ``coarse_band`` of the true plane, then those within
    ``band`` of the plane fitted to them. The crease Chamfer compares the mesh and the
    exact surface inside the cylinder of radius ``crease_radius`` around the
    crease line (central 80% of its length).
    """
    L = crease.length
    s = sample_mesh(mesh, n_samples, seed)
    inner_y = 0.4 * L
    fits = []
    counts = []
    for wing in (0, 1):
        t, y, h = _wing_coords(s, crease, wing)
        window = (t > wing_range[0] * L) & (t < wing_range[1] * L) & (np.abs(y) < inner_y)
        # coarse pass around the true plane, then a tight band around the first fit
        sel = window & (np.abs(h) < coarse_band * L)
        fit = None
        if sel.sum() >= 3:
            c = s[sel].mean(0)
            nrm = np.linalg.svd(s[sel] - c, full_matrices=False)[2][2]
            sel = window & (np.abs((s - c) @ nrm) < band * L)
            if sel.sum() >= 3:
                fit = _fit_wing_direction(s[sel], crease)
        counts.append(int(sel.sum()))
        fits.append(fit)
    if fits[0] is None or fits[1] is None:
        dihedral = float("nan")
    else:
        dihedral = math.degrees(math.acos(float(np.clip(fits[0] @ fits[1], -1, 1))))

    def near_line(p):
        radial = p - np.outer(p @ crease.axis, crease.axis)
        return (np.linalg.norm(radial, axis=1) < crease_radius * L) & (np.abs(p @ crease.axis) < inner_y)

    exact = crease.sample(n_samples, np.random.default_rng(seed + 1))
    ref = exact[near_line(exact)]
    rec = s[near_line(s)]
    cc = chamfer(rec, ref) if len(rec) and len(ref) else float("inf")
    return CreaseReport(dihedral, float(cc), counts[0], counts[1], int(len(rec)))
