"""Embedded analytic checks run by ``octafield selftest``."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry as geo
from . import octahedral as oc
from . import oracles
from .nets import eval_f, siren_init

__all__ = ["Check", "FAULTS", "run_selftest", "format_table"]

FAULTS = ("rx90",)


@dataclass
class Check:
    name: str
    passed: bool
    error: float
    tolerance: float
    seconds: float


def _rotations(n, seed):
    return Rotation.random(n, random_state=seed).as_matrix()


def _corrupt_rx90() -> np.ndarray:
    bad = np.array(oc._RX90, dtype=float)
    bad[4, 4] += 0.25
    return bad


def _sh_orthonormality():
    dirs, w = oracles.sphere_quadrature()
    Y = oc.sh_band4(dirs)
    return np.abs((Y * w[:, None]).T @ Y - np.eye(9)).max()


def _sh_vs_scipy():
    d = np.random.default_rng(0).normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.abs(oc.sh_band4(d) - oracles.real_sh(4, d)).max()


def _canonical_projection():
    c = oracles.project_onto_band(lambda s: (s ** 4).sum(1))
    return np.abs(c / np.linalg.norm(c) - oc.canonical_coeffs()).max()


def _homomorphism(rx90):
    Rs = _rotations(40, 1)
    err = 0.0
    for A, B in zip(Rs[:20], Rs[20:]):
        DA = oc.wigner_from_rotation(A, _rx90=rx90)
        DB = oc.wigner_from_rotation(B, _rx90=rx90)
        DAB = oc.wigner_from_rotation(A @ B, _rx90=rx90)
        err = max(err, np.abs(DAB - DA @ DB).max())
    return err


def _wigner_vs_quadrature(rx90):
    q0 = oc.canonical_coeffs()
    err = 0.0
    for R in _rotations(5, 2):
        ref = oracles.project_onto_band(lambda s: oc.evaluate_descriptor(q0, s @ R))
        ref = ref / np.linalg.norm(ref)
        err = max(err, np.abs(oc.wigner_from_rotation(R, _rx90=rx90) @ q0 - ref).max())
    return err


def _cubic_fixpoints(rx90):
    q0 = oc.canonical_coeffs()
    return max(np.abs(oc.wigner_from_rotation(R, _rx90=rx90) @ q0 - q0).max() for R in oc.octahedral_group())


def _exp_vs_zyz(rx90):
    vs = np.random.default_rng(3).normal(size=(20, 3))
    err = 0.0
    for v in vs:
        R = Rotation.from_rotvec(v).as_matrix()
        err = max(err, np.abs(oc.exp_so9(v) - oc.wigner_from_rotation(R, _rx90=rx90)).max())
    return err


def _projection_optimality():
    rng = np.random.default_rng(4)
    th = np.linspace(0, np.pi / 2, 2001)
    Z = np.stack([oc.z_aligned(t) for t in th])
    worst = -np.inf
    for _ in range(10):
        q = rng.normal(size=9)
        q /= np.linalg.norm(q)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        p = oc.project_normal(q, n)
        C = Z @ oc.wigner_from_rotation(oc.rotation_z_to_n(n)).T
        worst = max(worst, np.linalg.norm(q - p) - np.sqrt(((C - q) ** 2).sum(1)).min())
    return max(worst, 0.0)


def _sine_fd_gradient():
    net = siren_init(2, 16, seed=0, omega0=10.0)
    x = np.random.default_rng(5).uniform(-0.5, 0.5, size=(5, 3))
    err = 0.0
    for xi in x:
        _, g, H = eval_f(net, xi)
        gf = oracles.fd_gradient(lambda y: float(eval_f(net, y)[0]), xi, 1e-6)
        Hf = oracles.fd_hessian(lambda y: eval_f(net, y)[1], xi, 1e-5)
        err = max(err, np.abs(g - gf).max() / max(1.0, np.abs(gf).max()),
                  np.abs(H - Hf).max() / max(1.0, np.abs(Hf).max()))
    return err


def _metrics_brute_force():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
    return max(abs(geo.chamfer(a, b) - oracles.brute_chamfer(a, b)),
               abs(geo.hausdorff(a, b) - oracles.brute_hausdorff(a, b)),
               abs(geo.fscore(a, b, 0.3) - oracles.brute_fscore(a, b, 0.3)))


def run_selftest(fault: str | None = None) -> list[Check]:
    """Run every check; ``fault="rx90"`` corrupts the x-quarter-turn matrix as a negative control."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    rx90 = _corrupt_rx90() if fault == "rx90" else None
    plan = [
        ("sh_quadrature_orthonormality", _sh_orthonormality, 1e-12),
        ("sh_basis_vs_scipy", _sh_vs_scipy, 1e-12),
        ("canonical_frame_projection", _canonical_projection, 1e-12),
        ("wigner_homomorphism", lambda: _homomorphism(rx90), 1e-9),
        ("wigner_vs_quadrature", lambda: _wigner_vs_quadrature(rx90), 1e-9),
        ("cubic_group_fixpoints", lambda: _cubic_fixpoints(rx90), 1e-9),
        ("exp_so9_vs_zyz", lambda: _exp_vs_zyz(rx90), 1e-8),
        ("projection_beats_grid", _projection_optimality, 1e-12),
        ("sine_net_fd_derivatives", _sine_fd_gradient, 1e-4),
        ("metrics_vs_brute_force", _metrics_brute_force, 0.0),
    ]
    out = []
    for name, fn, tol in plan:
        t = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                err = float(fn())
            except Exception:  # a crashing check is a failing check
                err = float("inf")
        ok = bool(np.isfinite(err) and err <= tol)
        out.append(Check(name, ok, err, tol, time.perf_counter() - t))
    return out


def format_table(checks: list[Check]) -> str:
    w = max(len(c.name) for c in checks)
    lines = [f"{'check':<{w}}  result  {'error':>10}  {'tolerance':>9}"]
    for c in checks:
        lines.append(f"{c.name:<{w}}  {'PASS' if c.passed else 'FAIL':<6}  {c.error:>10.3e}  {c.tolerance:>9.1e}")
    return "\n".join(lines)
