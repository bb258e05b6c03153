"""Reference computations that share no code with the main routes.

Spherical harmonics come from scipy's complex ``sph_harm_y``, projections
from a product Gauss-Legendre quadrature, derivatives from central finite
differences and nearest neighbours from brute-force distance matrices.
"""
from __future__ import annotations

import numpy as np
from scipy.special import sph_harm_y

__all__ = [
    "real_sh",
    "sphere_quadrature",
    "project_onto_band",
    "fd_gradient",
    "fd_hessian",
    "brute_nearest",
    "brute_chamfer",
    "brute_hausdorff",
    "brute_fscore",
    "brute_knn_distance",
]


def real_sh(l: int, dirs) -> np.ndarray:
    """Real orthonormal band-``l`` harmonics at unit ``dirs``, order ``m = -l..l``.

    No Condon-Shortley phase: the scipy phase is undone by ``(-1)^m``.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    out = np.empty((len(dirs), 2 * l + 1))
    for m in range(-l, l + 1):
        y = sph_harm_y(l, abs(m), theta, phi)
        if m > 0:
            out[:, l + m] = np.sqrt(2.0) * (-1) ** m * y.real
        elif m < 0:
            out[:, l + m] = np.sqrt(2.0) * (-1) ** m * y.imag
        else:
            out[:, l] = y.real
    return out


def sphere_quadrature(n_theta: int = 24, n_phi: int = 48):
    """Directions and weights integrating polynomials of degree < ``min(2 n_theta, n_phi)`` exactly."""
    x, w = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1 - ct ** 2)
    dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], -1).reshape(-1, 3)
    weights = (w[:, None] * np.full(n_phi, 2 * np.pi / n_phi)[None, :]).reshape(-1)
    return dirs, weights


def project_onto_band(func, l: int = 4, n_theta: int = 24, n_phi: int = 48) -> np.ndarray:
    """Coefficients of ``func`` (vectorised over ``(N, 3)`` directions) on band ``l``."""
    dirs, w = sphere_quadrature(n_theta, n_phi)
    return real_sh(l, dirs).T @ (w * func(dirs))


def fd_gradient(fun, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def fd_hessian(grad_fun, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrised."""
    x = np.asarray(x, dtype=float)
    H = np.empty((x.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        H[:, i] = (grad_fun(x + e) - grad_fun(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def brute_nearest(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return d.min(1)


def brute_chamfer(a, b) -> float:
    return 0.5 * (brute_nearest(a, b).mean() + brute_nearest(b, a).mean())


def brute_hausdorff(a, b) -> float:
    return float(max(brute_nearest(a, b).max(), brute_nearest(b, a).max()))


def brute_fscore(a, b, tau: float) -> float:
    p = float(np.mean(brute_nearest(a, b) <= tau))
    r = float(np.mean(brute_nearest(b, a) <= tau))
    return 0.0 if p + r == 0 else 100.0 * 2 * p * r / (p + r)


def brute_knn_distance(pts, k: int) -> np.ndarray:
    """Distance to the ``k``-th closest point, counting the point itself as the first."""
    pts = np.asarray(pts, dtype=float)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    return np.sort(d, axis=1)[:, k - 1]
