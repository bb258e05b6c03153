"""Data behind the figure-style outputs: loss manifolds over directions and frame glyphs."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import octahedral as oc
from .losses import project_normal_batch

__all__ = [
    "MANIFOLD_LOSSES",
    "fibonacci_sphere",
    "manifold_loss",
    "manifold_loss_reference",
    "local_minima",
    "refine_minima",
    "certify_minima",
    "manifold_minima",
    "Glyphs",
    "frame_glyphs",
]

MANIFOLD_LOSSES = ("l1", "l2", "cosine")


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` nearly uniform unit directions on a golden-angle spiral."""
    if n < 1:
        raise ValueError("need at least one direction")
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = np.pi * (1 + 5 ** 0.5) * k
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def _phi(loss: str, a, b, xp):
    d = a - b
    if loss == "l1":
        return xp.abs(d).sum(-1)
    if loss == "l2":
        return xp.sqrt((d * d).sum(-1))
    if loss == "cosine":
        return 1.0 - (a * b).sum(-1)
    raise ValueError(f"loss must be one of {MANIFOLD_LOSSES}, got {loss!r}")


def manifold_loss(loss: str, dirs, q=None, chunk: int = 65536) -> np.ndarray:
    """Loss between ``q`` (default the canonical frame) and its projection onto each normal.

    ``l2`` is the unsquared Euclidean distance; ``cosine`` is ``1 - <q, Pi>``
    for unit ``q``, so it lies in ``[0, 2]``.
    """
    if loss not in MANIFOLD_LOSSES:
        raise ValueError(f"loss must be one of {MANIFOLD_LOSSES}, got {loss!r}")
    q = oc.canonical_coeffs() if q is None else np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    out = np.empty(len(dirs))
    qt = torch.as_tensor(q, dtype=torch.float64)
    for s in range(0, len(dirs), chunk):
        n = torch.as_tensor(dirs[s:s + chunk], dtype=torch.float64)
        qb = qt.expand(len(n), 9)
        proj = project_normal_batch(qb, n)
        out[s:s + chunk] = _phi(loss, qb, proj, torch).numpy()
    return out


def manifold_loss_reference(loss: str, d, q=None) -> float:
    """Single-direction value through the closed-form numpy projection."""
    q = oc.canonical_coeffs() if q is None else np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    return float(_phi(loss, q, oc.project_normal(q, np.asarray(d, dtype=float)), np))


def local_minima(dirs, values, k: int = 12) -> np.ndarray:
    """Indices whose value is strictly below all ``k`` nearest neighbouring directions."""
    dirs, values = np.asarray(dirs, dtype=float), np.asarray(values, dtype=float)
    _, idx = cKDTree(dirs).query(dirs, k=k + 1)
    nb = values[idx[:, 1:]]
    return np.flatnonzero(np.all(values[:, None] < nb, axis=1))


def _tangent_basis(x):
    helper = np.where(np.abs(x[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
    e1 = np.cross(x, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    return e1, np.cross(x, e1)


def refine_minima(loss: str, starts, step: float, q=None, n_dirs: int = 64, min_step: float = 1e-10,
                  max_iter: int = 2000) -> np.ndarray:
    """Pattern search on the sphere from each start; returns the end points.

    Each round tries ``n_dirs`` geodesic steps around the current point,
    moves to the best one if it improves (doubling the step) and otherwise
    halves the step. The many directions keep the search moving along the
    narrow valleys that the L1 loss has on symmetry planes.
    """
    x = np.asarray(starts, dtype=float).reshape(-1, 3).copy()
    fx = manifold_loss(loss, x, q)
    s = np.full(len(x), float(step))
    ang = 2 * np.pi * np.arange(n_dirs) / n_dirs
    for _ in range(max_iter):
        live = s > min_step
        if not live.any():
            break
        xi = x[live]
        e1, e2 = _tangent_basis(xi)
        t = np.cos(ang)[None, :, None] * e1[:, None] + np.sin(ang)[None, :, None] * e2[:, None]
        si = s[live][:, None, None]
        trial = np.cos(si) * xi[:, None] + np.sin(si) * t
        trial /= np.linalg.norm(trial, axis=-1, keepdims=True)
        ft = manifold_loss(loss, trial.reshape(-1, 3), q).reshape(len(xi), n_dirs)
        j = ft.argmin(1)
        better = ft[np.arange(len(xi)), j] < fx[live]
        ids = np.flatnonzero(live)
        mv = ids[better]
        x[mv] = trial[better, j[better]]
        fx[mv] = ft[better, j[better]]
        s[mv] = np.minimum(2 * s[mv], 0.5)
        s[ids[~better]] *= 0.5
    return x


def certify_minima(loss: str, x, q=None, radii=(1e-6, 1e-5, 1e-4, 1e-3, 1e-2), n_ring: int = 360):
    """Check each point against rings of directions around it.

    Returns ``(is_min, lower)``: ``is_min[i]`` is True when no ring point is
    strictly below ``x[i]``; otherwise ``lower[i]`` is the lowest ring point.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    fx = manifold_loss(loss, x, q)
    e1, e2 = _tangent_basis(x)
    ang = 2 * np.pi * np.arange(n_ring) / n_ring
    t = np.cos(ang)[None, :, None] * e1[:, None] + np.sin(ang)[None, :, None] * e2[:, None]
    rings = np.concatenate([np.cos(r) * x[:, None] + np.sin(r) * t for r in radii], axis=1)
    rings /= np.linalg.norm(rings, axis=-1, keepdims=True)
    fr = manifold_loss(loss, rings.reshape(-1, 3), q).reshape(len(x), -1)
    j = fr.argmin(1)
    is_min = fr[np.arange(len(x)), j] >= fx
    return is_min, rings[np.arange(len(x)), j]


def manifold_minima(loss: str, dirs, values=None, q=None, k: int = 12, merge: float = 1e-4,
                    rounds: int = 10) -> np.ndarray:
    """Distinct local minima: sweep candidates refined by pattern search, certified and merged.

    Candidates are the directions lower than their ``k`` nearest sweep
    neighbours. After refinement each end point must pass
    :func:`certify_minima`; points with a lower value nearby restart from it,
    and those still descending after ``rounds`` restarts are dropped (they
    approach an infimum that is not attained, as L1 does next to the body
    diagonals). End points closer than ``merge`` radians are one minimum.
    """
    dirs = np.asarray(dirs, dtype=float)
    if values is None:
        values = manifold_loss(loss, dirs, q)
    cand = local_minima(dirs, values, k)
    step = 2.0 * np.sqrt(4 * np.pi / len(dirs))
    pts = refine_minima(loss, dirs[cand], step, q)
    kept = []
    for _ in range(rounds):
        if len(pts) == 0:
            break
        ok, lower = certify_minima(loss, pts, q)
        kept.extend(pts[ok])
        pts = refine_minima(loss, lower[~ok], step, q) if (~ok).any() else pts[:0]
    found: list[np.ndarray] = []
    for e in kept:
        if not any(np.arccos(np.clip(e @ f, -1, 1)) < merge for f in found):
            found.append(e)
    return np.array(found).reshape(-1, 3)


@dataclass
class Glyphs:
    centers: np.ndarray  # (G, 3)
    axes: np.ndarray  # (G, 3, 3), columns are the frame axes
    residual: np.ndarray  # (G,) distance of the unit field value from the recovered frame
    flagged: np.ndarray  # (G,) bool


def frame_glyphs(u_net, pts, threshold: float = 0.05, iters: int = 50) -> Glyphs:
    """Recover a frame from the field at each point and measure how far off the variety it is."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    dtype = next(u_net.parameters()).dtype
    with torch.no_grad():
        q = u_net(torch.as_tensor(pts, dtype=dtype)).double().numpy()
    axes = np.empty((len(pts), 3, 3))
    res = np.empty(len(pts))
    for i, qi in enumerate(q):
        nq = np.linalg.norm(qi)
        if not nq > 0:
            axes[i] = np.eye(3)
            res[i] = np.inf
            continue
        qi = qi / nq
        with warnings.catch_warnings():
            # points far from the variety are reported through the residual instead
            warnings.simplefilter("ignore", oc.ConvergenceWarning)
            R = oc.recover_axes(qi, iters=iters)
        axes[i] = R
        res[i] = np.linalg.norm(oc.coeffs_from_axes(R[:, 0], R[:, 1], R[:, 2]) - qi)
    return Glyphs(pts, axes, res, res > threshold)
