"""Octahedral frames as band-4 spherical harmonic coefficient vectors.

A frame with axes ``v1, v2, v3`` is encoded by the band-4 part of the
spherical polynomial ``F(s) = sum_i (v_i . s)^4``. Real SH basis, orders
m = -4..4 ascending, no Condon-Shortley phase, so index 4 is Y_4^0 and index
8 is the cos(4 phi) harmonic.

Conventions used throughout:

* ``wigner_from_rotation(R) @ c`` are the coefficients of ``F(R^T s)`` when
  ``c`` are the coefficients of ``F(s)``. This makes the map a homomorphism.
* A rotation is a 3x3 matrix whose columns are the frame axes.
"""
from __future__ import annotations

import warnings
from math import pi, sqrt

import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

__all__ = [
    "AmbiguousTwistWarning",
    "ConvergenceWarning",
    "Q0",
    "canonical_coeffs",
    "sh_band2",
    "sh_band4",
    "wigner_z",
    "wigner_from_rotation",
    "exp_so9",
    "so9_generators",
    "functional_difference",
    "z_aligned",
    "project_z",
    "project_normal",
    "rotation_z_to_n",
    "evaluate_descriptor",
    "descriptor_gradient",
    "recover_axes",
    "coeffs_from_axes",
    "band2_residual",
    "project_variety",
    "variety_residual",
    "octahedral_group",
]


class AmbiguousTwistWarning(RuntimeWarning):
    """The twist of a z-aligned projection is undetermined (q[0] = q[8] = 0)."""


class ConvergenceWarning(RuntimeWarning):
    """An iterative frame routine stopped before reaching its tolerance."""


Q0 = np.array([0.0, 0.0, 0.0, 0.0, sqrt(7.0 / 12.0), 0.0, 0.0, 0.0, sqrt(5.0 / 12.0)])
Q0.setflags(write=False)

_S7 = sqrt(7.0 / 12.0)
_S5 = sqrt(5.0 / 12.0)


def canonical_coeffs() -> np.ndarray:
    """Coefficients of the axis-aligned frame ``x^4 + y^4 + z^4``."""
    return Q0.copy()


# ---------------------------------------------------------------------------
# SH basis as homogeneous polynomials
# ---------------------------------------------------------------------------

# degree-4 monomial exponents (a, b, c) for x^a y^b z^c
_MONO4 = [
    (4, 0, 0), (3, 1, 0), (3, 0, 1), (2, 2, 0), (2, 1, 1),
    (2, 0, 2), (1, 3, 0), (1, 2, 1), (1, 1, 2), (1, 0, 3),
    (0, 4, 0), (0, 3, 1), (0, 2, 2), (0, 1, 3), (0, 0, 4),
]
_MONO4_INDEX = {m: i for i, m in enumerate(_MONO4)}


def _band4_table() -> np.ndarray:
    k1 = 0.75 * sqrt(35.0 / pi)
    k2 = 0.75 * sqrt(35.0 / (2.0 * pi))
    k3 = 0.75 * sqrt(5.0 / pi)
    k4 = 0.75 * sqrt(5.0 / (2.0 * pi))
    k5 = 3.0 / (16.0 * sqrt(pi))
    k6 = 0.375 * sqrt(5.0 / pi)
    k7 = (3.0 / 16.0) * sqrt(35.0 / pi)
    # homogeneous forms: r^2 terms expanded so the polynomials stay harmonic off the sphere
    rows = [
        (k1, {(3, 1, 0): 1, (1, 3, 0): -1}),
        (k2, {(2, 1, 1): 3, (0, 3, 1): -1}),
        (k3, {(1, 1, 2): 6, (3, 1, 0): -1, (1, 3, 0): -1}),
        (k4, {(0, 1, 3): 4, (2, 1, 1): -3, (0, 3, 1): -3}),
        (k5, {(4, 0, 0): 3, (0, 4, 0): 3, (0, 0, 4): 8, (2, 2, 0): 6, (2, 0, 2): -24, (0, 2, 2): -24}),
        (k4, {(1, 0, 3): 4, (3, 0, 1): -3, (1, 2, 1): -3}),
        (k6, {(2, 0, 2): 6, (0, 2, 2): -6, (4, 0, 0): -1, (0, 4, 0): 1}),
        (k2, {(3, 0, 1): 1, (1, 2, 1): -3}),
        (k7, {(4, 0, 0): 1, (2, 2, 0): -6, (0, 4, 0): 1}),
    ]
    table = np.zeros((9, len(_MONO4)))
    for i, (k, terms) in enumerate(rows):
        for mono, c in terms.items():
            table[i, _MONO4_INDEX[mono]] = k * c
    return table


_BAND4 = _band4_table()
_BAND4.setflags(write=False)


def _is_torch(x) -> bool:
    return type(x).__module__.startswith("torch")


def _stack(parts, like):
    if _is_torch(like):
        import torch

        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


def _monomials4(s):
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    px = [1, x, x * x, x * x * x, x * x * x * x]
    py = [1, y, y * y, y * y * y, y * y * y * y]
    pz = [1, z, z * z, z * z * z, z * z * z * z]
    parts = []
    for a, b, c in _MONO4:
        parts.append(px[a] * py[b] * pz[c])
    return _stack(parts, s)


def sh_band4(s):
    """Band-4 real SH basis at ``s`` (shape ``(..., 3)``) -> ``(..., 9)``.

    Evaluated as homogeneous quartics, so only unit ``s`` gives the true SH
    values. Accepts numpy arrays or torch tensors.
    """
    mono = _monomials4(s)
    if _is_torch(s):
        import torch

        table = torch.tensor(np.array(_BAND4), dtype=s.dtype, device=s.device)
        return mono @ table.T
    return mono @ _BAND4.T


def sh_band2(s: np.ndarray) -> np.ndarray:
    """Band-2 real SH basis (m = -2..2) at unit directions ``s``."""
    s = np.asarray(s, dtype=float)
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    a = 0.5 * sqrt(15.0 / pi)
    return np.stack(
        [
            a * x * y,
            a * y * z,
            0.25 * sqrt(5.0 / pi) * (2.0 * z * z - x * x - y * y),
            a * x * z,
            0.25 * sqrt(15.0 / pi) * (x * x - y * y),
        ],
        axis=-1,
    )


def _band4_gradient(v: np.ndarray) -> np.ndarray:
    """Gradient of each homogeneous band-4 polynomial at ``v`` -> ``(9, 3)``."""
    grads = np.zeros((len(_MONO4), 3))
    for i, (a, b, c) in enumerate(_MONO4):
        x, y, z = v
        if a:
            grads[i, 0] = a * x ** (a - 1) * y**b * z**c
        if b:
            grads[i, 1] = b * x**a * y ** (b - 1) * z**c
        if c:
            grads[i, 2] = c * x**a * y**b * z ** (c - 1)
    return _BAND4 @ grads


# ---------------------------------------------------------------------------
# Wigner D-matrices for band 4
# ---------------------------------------------------------------------------

_R2 = sqrt(2.0)
_R5 = sqrt(5.0)
_R7 = sqrt(7.0)
_R14 = sqrt(14.0)
_R35 = sqrt(35.0)

# D(R_x(pi/2)), exact
_RX90 = np.array(
    [
        [0, 0, 0, 0, 0, _R14 / 4, 0, -_R2 / 4, 0],
        [0, -0.75, 0, _R7 / 4, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, _R2 / 4, 0, _R14 / 4, 0],
        [0, _R7 / 4, 0, 0.75, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, 0.375, 0, _R5 / 4, 0, _R35 / 8],
        [-_R14 / 4, 0, -_R2 / 4, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, _R5 / 4, 0, 0.5, 0, -_R7 / 4],
        [_R2 / 4, 0, -_R14 / 4, 0, 0, 0, 0, 0, 0],
        [0, 0, 0, 0, _R35 / 8, 0, -_R7 / 4, 0, 0.125],
    ]
)
_RX90.setflags(write=False)


def _generators() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lx = np.zeros((9, 9))
    ly = np.zeros((9, 9))
    lz = np.zeros((9, 9))
    a, b, c, d = _R2, _R14 / 2, 3 * _R2 / 2, sqrt(10.0)
    for i, j, v in [(0, 7, -a), (1, 6, -b), (1, 8, -a), (2, 5, -c), (2, 7, -b), (3, 4, -d), (3, 6, -c)]:
        lx[i, j] = v
        lx[j, i] = -v
    for i, j, v in [(0, 1, a), (1, 2, b), (2, 3, c), (4, 5, -d), (5, 6, -c), (6, 7, -b), (7, 8, -a)]:
        ly[i, j] = v
        ly[j, i] = -v
    for m in range(1, 5):
        lz[4 - m, 4 + m] = m
        lz[4 + m, 4 - m] = -m
    for g in (lx, ly, lz):
        g.setflags(write=False)
    return lx, ly, lz


_LX, _LY, _LZ = _generators()


def so9_generators() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The so(9) images of the x, y, z rotation generators."""
    return _LX.copy(), _LY.copy(), _LZ.copy()


def wigner_z(theta: float) -> np.ndarray:
    """Band-4 Wigner matrix of a rotation by ``theta`` about z."""
    d = np.zeros((9, 9))
    d[4, 4] = 1.0
    for m in range(1, 5):
        c, s = np.cos(m * theta), np.sin(m * theta)
        d[4 + m, 4 + m] = c
        d[4 - m, 4 - m] = c
        d[4 + m, 4 - m] = -s
        d[4 - m, 4 + m] = s
    return d


def _check_rotation(R: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"expected a 3x3 rotation, got shape {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol or np.linalg.det(R) < 0:
        raise ValueError(f"not a rotation matrix (orthogonality residual {err:.3g})")
    return R


def _zyz_angles(R: np.ndarray) -> tuple[float, float, float]:
    a0 = np.arctan2(R[1, 2], R[0, 2])
    g0 = np.arctan2(R[2, 1], -R[2, 0])
    # Near beta = 0 (pi) the sum (difference) of alpha and gamma is poorly
    # determined by the column/row above; take it from the upper 2x2 block.
    if R[2, 2] >= 0.0:
        plus = np.arctan2(R[1, 0] - R[0, 1], R[0, 0] + R[1, 1])
        plus += 2 * pi * np.round((a0 + g0 - plus) / (2 * pi))
        minus = a0 - g0
    else:
        minus = np.arctan2(-(R[1, 0] + R[0, 1]), R[1, 1] - R[0, 0])
        minus += 2 * pi * np.round((a0 - g0 - minus) / (2 * pi))
        plus = a0 + g0
    alpha, gamma = 0.5 * (plus + minus), 0.5 * (plus - minus)
    sin_beta = np.cos(alpha) * R[0, 2] + np.sin(alpha) * R[1, 2]
    return alpha, np.arctan2(sin_beta, R[2, 2]), gamma


def wigner_from_rotation(R: np.ndarray, _rx90: np.ndarray | None = None) -> np.ndarray:
    """Band-4 Wigner matrix induced by rotation ``R`` via ZYZ Euler angles.

    ``R_y(b)`` is obtained by conjugating ``R_z(b)`` with the exact constant
    ``D(R_x(pi/2))``.
    """
    R = _check_rotation(R)
    x90 = _RX90 if _rx90 is None else _rx90
    alpha, beta, gamma = _zyz_angles(R)
    return wigner_z(alpha) @ x90.T @ wigner_z(beta) @ x90 @ wigner_z(gamma)


def exp_so9(v) -> np.ndarray:
    """``expm(v . L)`` for a rotation vector ``v``."""
    v = np.asarray(v, dtype=float)
    return expm(v[0] * _LX + v[1] * _LY + v[2] * _LZ)


def functional_difference(qa, qb) -> float:
    """Squared L2 distance between two descriptor functions (= ||qa - qb||^2)."""
    d = np.asarray(qa, dtype=float) - np.asarray(qb, dtype=float)
    return float(d @ d)


# ---------------------------------------------------------------------------
# Alignment and projection
# ---------------------------------------------------------------------------


def z_aligned(theta: float) -> np.ndarray:
    """Frame with one axis on z, twisted by ``theta`` about it."""
    return np.array(
        [_S5 * np.sin(4 * theta), 0, 0, 0, _S7, 0, 0, 0, _S5 * np.cos(4 * theta)]
    )


def project_z(q) -> np.ndarray:
    """Closest z-aligned frame to ``q``.

    When ``q[0] = q[8] = 0`` every twist is equally close; the twist-0
    coefficients are returned and :class:`AmbiguousTwistWarning` is emitted.
    """
    q = np.asarray(q, dtype=float)
    r = np.hypot(q[0], q[8])
    out = np.zeros(9)
    out[4] = _S7
    if r < 1e-12:
        warnings.warn("z-projection twist is ambiguous (q[0] = q[8] = 0)", AmbiguousTwistWarning, stacklevel=2)
        out[0] = _S5
        return out
    out[0] = _S5 * q[0] / r
    out[8] = _S5 * q[8] / r
    return out


def rotation_z_to_n(n) -> np.ndarray:
    """Minimal rotation taking e_z to ``n``; the antipode maps to R_x(pi)."""
    n = np.asarray(n, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise ValueError("n must be a unit vector")
    c = n[2]
    if c < -1.0 + 1e-9:
        return np.diag([1.0, -1.0, -1.0])
    k = np.array([-n[1], n[0], 0.0])  # e_z x n
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


def project_normal(q, n) -> np.ndarray:
    """Closest frame to ``q`` having one axis along unit normal ``n``."""
    n = np.asarray(n, dtype=float)
    if n[2] < 0:
        n = -n  # same frame set, and keeps the rotation away from its singular case
    D = wigner_from_rotation(rotation_z_to_n(n))
    return D @ project_z(D.T @ np.asarray(q, dtype=float))


# ---------------------------------------------------------------------------
# Descriptor polynomial and axis recovery
# ---------------------------------------------------------------------------

# F(R^T s) = 3/5 + _DESCRIPTOR_SCALE * q . y4(s) on the unit sphere
_DESCRIPTOR_SCALE = 8.0 * sqrt(pi) / (5.0 * sqrt(21.0))
_DESCRIPTOR_CONST = 0.6


def evaluate_descriptor(q, s):
    """Value of ``sum_i (v_i . s)^4`` reconstructed from coefficients ``q``."""
    s = np.asarray(s, dtype=float)
    return _DESCRIPTOR_CONST + _DESCRIPTOR_SCALE * (sh_band4(s) @ np.asarray(q, dtype=float))


def descriptor_gradient(q, v) -> np.ndarray:
    """Gradient of the homogeneous quartic extension of the descriptor at ``v``."""
    v = np.asarray(v, dtype=float)
    iso = 4.0 * _DESCRIPTOR_CONST * (v @ v) * v
    return iso + _DESCRIPTOR_SCALE * (np.asarray(q, dtype=float) @ _band4_gradient(v))


def _power_iterate(q, v, basis=None, iters=50, tol=1e-12):
    converged = False
    for _ in range(iters):
        g = descriptor_gradient(q, v)
        if basis is not None:
            g = basis @ (basis.T @ g)
        g_norm = np.linalg.norm(g)
        if g_norm == 0.0:
            break
        nv = g / g_norm
        # iterates are sign-free (odd gradient), compare as lines
        step = min(np.linalg.norm(nv - v), np.linalg.norm(nv + v))
        v = nv
        if step < tol:
            converged = True
            break
    return v, converged


def recover_axes(q, starts: int = 8, iters: int = 50, tol: float = 1e-12, seed: int = 0) -> np.ndarray:
    """Frame axes of ``q`` by tensor power iteration on the descriptor.

    The first axis is the best of ``starts`` random starts; the second is
    found by iterating inside the plane orthogonal to it, and the third is
    their cross product. Returns a rotation whose columns are the axes.
    """
    q = np.asarray(q, dtype=float)
    rng = np.random.default_rng(seed)
    inits = rng.normal(size=(starts, 3))
    inits /= np.linalg.norm(inits, axis=1, keepdims=True)

    best, best_val, best_conv = None, -np.inf, False
    for v0 in inits:
        v, conv = _power_iterate(q, v0, iters=iters, tol=tol)
        val = evaluate_descriptor(q, v)
        if val > best_val:
            best, best_val, best_conv = v, val, conv
    v1 = best

    # orthonormal basis of the complement of v1
    helper = np.eye(3)[np.argmin(np.abs(v1))]
    a = np.cross(v1, helper)
    a /= np.linalg.norm(a)
    b = np.cross(v1, a)
    plane = np.stack([a, b], axis=1)

    best2, best2_val, conv2 = None, -np.inf, False
    for v0 in inits:
        w = plane @ (plane.T @ v0)
        nw = np.linalg.norm(w)
        if nw < 1e-8:
            continue
        v, conv = _power_iterate(q, w / nw, basis=plane, iters=iters, tol=tol)
        val = evaluate_descriptor(q, v)
        if val > best2_val:
            best2, best2_val, conv2 = v, val, conv
    v2 = best2 - (best2 @ v1) * v1
    v2 /= np.linalg.norm(v2)
    v3 = np.cross(v1, v2)
    if not (best_conv and conv2):
        warnings.warn("tensor power iteration did not converge; returning best iterate", ConvergenceWarning, stacklevel=2)
    return np.stack([v1, v2, v3], axis=1)


# ---------------------------------------------------------------------------
# Zonal-harmonic construction from explicit axes
# ---------------------------------------------------------------------------

_Z40 = 16.0 * sqrt(pi) / 105.0
_Z20 = _Z40 * 1.5 * sqrt(5.0)
# band-4 coefficient of (v . s)^4 per unit y4(v), rescaled to the q0 normalisation
_ZONAL4 = (2.0 * sqrt(pi) / 3.0) * _Z40 / _DESCRIPTOR_SCALE
_ZONAL2 = sqrt(4.0 * pi / 5.0) * _Z20


def _check_axes(axes, tol=1e-6):
    V = np.stack([np.asarray(v, dtype=float) for v in axes])
    if V.shape != (3, 3):
        raise ValueError("expected three 3-vectors")
    err = np.abs(V @ V.T - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"axes are not orthonormal (residual {err:.3g})")
    return V


def band2_residual(v1, v2, v3) -> float:
    """Norm of the summed band-2 zonal coefficients; zero for orthonormal axes."""
    V = np.stack([np.asarray(v, dtype=float) for v in (v1, v2, v3)])
    return float(np.linalg.norm(_ZONAL2 * sh_band2(V).sum(axis=0)))


def coeffs_from_axes(v1, v2, v3) -> np.ndarray:
    """Frame coefficients as the sum of three rotated zonal quartics."""
    V = _check_axes((v1, v2, v3))
    res = band2_residual(*V)
    if res > 1e-5:
        raise ValueError(f"band-2 part does not vanish ({res:.3g}); axes not orthogonal")
    return _ZONAL4 * sh_band4(V).sum(axis=0)


# ---------------------------------------------------------------------------
# Projection onto the octahedral variety (local descent, multi-start)
# ---------------------------------------------------------------------------


def _gauss_newton(f, R, iters=100, tol=1e-14):
    q = wigner_from_rotation(R) @ Q0
    err = np.linalg.norm(f - q)
    for _ in range(iters):
        J = np.stack([_LX @ q, _LY @ q, _LZ @ q], axis=1)
        delta = np.linalg.lstsq(J, f - q, rcond=None)[0]
        step = 1.0
        while step > 1e-6:
            R_new = Rotation.from_rotvec(step * delta).as_matrix() @ R
            q_new = wigner_from_rotation(R_new) @ Q0
            err_new = np.linalg.norm(f - q_new)
            if err_new <= err:
                break
            step *= 0.5
        else:
            break
        moved = err - err_new
        R, q, err = R_new, q_new, err_new
        if np.linalg.norm(step * delta) < tol or moved < tol:
            break
    return R, q, err


def project_variety(q, restarts: int = 16, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Nearest frame coefficients to ``q`` found by multi-start local descent.

    Returns ``(q_proj, R)``. Starts are the power-method axes of ``q`` plus
    ``restarts`` random rotations.
    """
    f = np.asarray(q, dtype=float)
    starts = []
    if np.linalg.norm(f) > 1e-12:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            starts.append(recover_axes(f / np.linalg.norm(f)))
    starts.extend(Rotation.random(restarts, random_state=seed).as_matrix())
    best = None
    for R0 in starts:
        R, qp, err = _gauss_newton(f, R0)
        if best is None or err < best[2]:
            best = (R, qp, err)
    return best[1], best[0]


def variety_residual(q, restarts: int = 16, seed: int = 0) -> float:
    """Distance from ``q`` to the octahedral variety (descent estimate)."""
    qp, _ = project_variety(q, restarts=restarts, seed=seed)
    return float(np.linalg.norm(np.asarray(q, dtype=float) - qp))


def octahedral_group() -> np.ndarray:
    """The 24 proper rotations mapping the coordinate axes onto themselves."""
    mats = []
    for perm in ([0, 1, 2], [1, 2, 0], [2, 0, 1], [1, 0, 2], [0, 2, 1], [2, 1, 0]):
        for signs in np.ndindex(2, 2, 2):
            M = np.zeros((3, 3))
            for col, row in enumerate(perm):
                M[row, col] = -1.0 if signs[col] else 1.0
            if np.linalg.det(M) > 0:
                mats.append(M)
    return np.array(mats)
