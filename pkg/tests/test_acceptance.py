"""Acceptance criteria 1-12, one reported line each.

Every test records a PASS/FAIL line through ``acceptance_report`` (echoed live
and repeated in the terminal summary) and then asserts the criterion at its
stated tolerance. Criteria that cannot hold as stated are marked
``xfail(strict=True)``: their line still reads FAIL and the run stays green
only while they keep failing.
"""
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy.spatial.transform import Rotation

from octafield import geometry as geo
from octafield import octahedral as oc
from octafield import oracles
from octafield.figures import fibonacci_sphere, manifold_loss, manifold_minima
from octafield.fixtures import crease_cloud, measure_crease, sphere_cloud, sphere_samples
from octafield.io import write_mesh
from octafield.losses import LossWeights, TERMS, det3, total_loss
from octafield.nets import eval_f, lipnet_init, load_checkpoint, save_checkpoint, siren_init, softplus_inverse
from octafield.training import TrainConfig, fit, knn_sigma, sample_close, sample_off

AXES = np.vstack([np.eye(3), -np.eye(3)])


def _rotations(n, seed):
    return Rotation.random(n, random_state=seed).as_matrix()


# ---------------------------------------------------------------------------
# 1-4: octahedral algebra
# ---------------------------------------------------------------------------


def test_criterion_01_sh_oracle_suite(acceptance_report):
    t = time.perf_counter()
    q0 = oc.canonical_coeffs()
    Rs = _rotations(200, 1)
    hom = max(np.abs(oc.wigner_from_rotation(A @ B) - oc.wigner_from_rotation(A) @ oc.wigner_from_rotation(B)).max()
              for A, B in zip(Rs[:100], Rs[100:]))
    group = oc.octahedral_group()
    fix = max(np.abs(oc.wigner_from_rotation(R) @ q0 - q0).max() for R in group)
    quad = 0.0
    for R in _rotations(20, 2):
        ref = oracles.project_onto_band(lambda s, R=R: oc.evaluate_descriptor(q0, s @ R))
        quad = max(quad, np.abs(oc.wigner_from_rotation(R) @ q0 - ref / np.linalg.norm(ref)).max())
    zyz = 0.0
    for v in np.random.default_rng(3).normal(size=(100, 3)):
        zyz = max(zyz, np.abs(oc.exp_so9(v) - oc.wigner_from_rotation(Rotation.from_rotvec(v).as_matrix())).max())
    secs = time.perf_counter() - t
    worst = max(hom, fix, quad, zyz)
    ok = len(group) == 24 and worst < 1e-8 and secs < 10
    acceptance_report(1, ok, f"homomorphism {hom:.1e}, 24 fixpoints {fix:.1e}, quadrature {quad:.1e}, "
                             f"exp_so9 vs ZYZ {zyz:.1e} (tol 1e-8); {secs:.2f} s (limit 10 s)")
    assert ok


def test_criterion_02_zonal_vs_wigner(acceptance_report):
    q0 = oc.canonical_coeffs()
    err = max(np.abs(oc.coeffs_from_axes(R[:, 0], R[:, 1], R[:, 2]) - oc.wigner_from_rotation(R) @ q0).max()
              for R in _rotations(100, 4))
    acceptance_report(2, err < 1e-8, f"max |zonal - wigner q0| = {err:.1e} on 100 rotations (tol 1e-8)")
    assert err < 1e-8


def test_criterion_03_projection_optimality(acceptance_report):
    rng = np.random.default_rng(5)
    th = np.linspace(0, 2 * np.pi, 10_000, endpoint=False)
    Z = np.stack([oc.z_aligned(t) for t in th])
    worst = -np.inf
    for _ in range(100):
        q = rng.normal(size=9)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        p = oc.project_normal(q, n)
        C = Z @ oc.wigner_from_rotation(oc.rotation_z_to_n(n)).T
        grid = np.sqrt(((C - q) ** 2).sum(1)).min()
        worst = max(worst, np.linalg.norm(q - p) - grid)
    ok = worst <= 1e-9
    acceptance_report(3, ok, f"max(|q - proj| - grid minimum) = {worst:.2e} over 100 pairs (slack 1e-9)")
    assert ok


def test_criterion_04_recover_axes_round_trip(acceptance_report):
    q0 = oc.canonical_coeffs()
    worst = 0.0
    for R in _rotations(100, 6):
        A = oc.recover_axes(oc.wigner_from_rotation(R) @ q0)
        M = np.abs(A.T @ R)  # a signed permutation matrix when the axes agree
        P = (M > 0.5).astype(float)
        assert (P.sum(0) == 1).all() and (P.sum(1) == 1).all()
        worst = max(worst, np.abs(M - P).max())
    acceptance_report(4, worst < 1e-6, f"max deviation from a signed permutation {worst:.1e} on 100 rotations "
                                        "(tol 1e-6)")
    assert worst < 1e-6


# ---------------------------------------------------------------------------
# 5-6: derivatives and Lipschitz bound
# ---------------------------------------------------------------------------


def _fd_param_check(params, loss_fn, rng, per_tensor=4, h=1e-6):
    """Largest relative error of autograd against central differences on sampled entries."""
    analytic = param_grad_any(params, loss_fn())
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        idx = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
        for i in idx:
            old = flat[i].item()
            flat[i] = old + h
            lp = float(loss_fn().detach())
            flat[i] = old - h
            lm = float(loss_fn().detach())
            flat[i] = old
            num = (lp - lm) / (2 * h)
            scale = max(abs(num), abs(gflat[i]), 1e-6)
            worst = max(worst, abs(gflat[i] - num) / scale)
    return worst


def param_grad_any(params, loss):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [np.zeros(tuple(p.shape)) if g is None else g.detach().numpy() for g, p in zip(grads, params)]


def test_criterion_05_derivatives(acceptance_report):
    rng = np.random.default_rng(7)
    # spatial derivatives of random sine nets
    g_err = h_err = 0.0
    for seed in range(10):
        net = siren_init(3, 24, seed=seed, omega0=10.0)
        for x in rng.uniform(-0.8, 0.8, size=(3, 3)):
            _, g, H = eval_f(net, x)
            gf = oracles.fd_gradient(lambda y: float(eval_f(net, y)[0]), x, 1e-6)
            Hf = oracles.fd_hessian(lambda y: eval_f(net, y)[1], x, 1e-5)
            g_err = max(g_err, np.abs(g - gf).max() / max(np.abs(gf).max(), 1e-12))
            h_err = max(h_err, np.abs(H - Hf).max() / max(np.abs(Hf).max(), 1e-12))

    # parameter gradients of every loss term, one term active at a time
    cloud = sphere_cloud(200, seed=1) * 0.8
    p = torch.tensor(cloud[:24])
    pc = torch.tensor(sample_close(cloud, knn_sigma(cloud, 8), 24, np.random.default_rng(2)))
    po = torch.tensor(sample_off(24, np.random.default_rng(3)))
    term_err = {}
    for term in TERMS:
        f = siren_init(2, 12, seed=4, omega0=10.0)
        u = lipnet_init(2, 12, seed=5, input_scale=1.0)
        with torch.no_grad():
            # at init each bound equals the largest row sum, where row rescaling has a kink
            for c in u.c_raw:
                c.copy_(softplus_inverse(0.8 * F.softplus(c)))
        active = {k: k == term for k in TERMS}
        w = LossWeights()
        # each network's own parameters; the stop-gradient side is covered by criterion 10
        own = {"align": u, "regularize": f, "lip": u}.get(term, f)
        params = list(own.parameters())
        term_err[term] = _fd_param_check(params, lambda: total_loss(f, u, p, pc, po, w, active).total_tensor, rng)
    # third-order path directly: d/dtheta |det H|
    f = siren_init(2, 12, seed=6, omega0=10.0)
    x = torch.tensor(rng.uniform(-0.5, 0.5, (4, 3)))
    term_err["det_hessian"] = _fd_param_check(list(f.parameters()), lambda: det3(f(x, order=2)[2]).abs().sum(), rng)
    worst_term = max(term_err.values())
    ok = g_err < 1e-4 and h_err < 1e-3 and worst_term < 1e-2
    detail = ", ".join(f"{k} {v:.1e}" for k, v in term_err.items())
    acceptance_report(5, ok, f"grad {g_err:.1e} (tol 1e-4), hessian {h_err:.1e} (tol 1e-3), "
                             f"parameter gradients [{detail}] (tol 1e-2)")
    assert ok


def _lipschitz_violations(u, bound, rng, n=10_000):
    count, worst = 0, 0.0
    for spread in (1.0, 1e-2, 1e-4):
        a = rng.uniform(-1, 1, (n, 3))
        b = a + rng.uniform(-spread, spread, (n, 3))
        with torch.no_grad():
            ua = u(torch.tensor(a)).numpy()
            ub = u(torch.tensor(b)).numpy()
        ratio = np.abs(ua - ub).max(1) / np.abs(a - b).max(1)
        count += int((ratio > bound).sum())
        worst = max(worst, float(ratio.max()))
    return count, worst


# ---------------------------------------------------------------------------
# sphere fit shared by criteria 6, 9 and 12
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sphere_run(tmp_path_factory):
    cloud = sphere_cloud(5000, seed=0)
    pts, tr = geo.normalize(cloud)
    cfg = TrainConfig.desk()
    t = time.perf_counter()
    res = fit(pts, cfg)
    mesh = geo.extract_mesh(res.f_net, 128)
    secs = time.perf_counter() - t
    out = tmp_path_factory.mktemp("sphere")
    save_checkpoint(out / "a.bin", res.f_net, res.u_net)
    write_mesh(out / "a.ply", mesh)
    return {"pts": pts, "tr": tr, "cfg": cfg, "res": res, "mesh": mesh, "seconds": secs, "dir": out}


def test_criterion_06_lipschitz_bound(acceptance_report, sphere_run):
    rng = np.random.default_rng(8)
    lines, total = [], 0
    nets = [(f"random seed {s}", lipnet_init(3, 64, seed=s, input_scale=100.0)) for s in range(3)]
    f, u, _ = load_checkpoint(sphere_run["dir"] / "a.bin")  # trained field, in float64
    nets.append(("trained", u))
    for name, net in nets:
        bound = float(net.lipschitz_bound().detach())
        count, worst = _lipschitz_violations(net, bound, rng)
        total += count
        lines.append(f"{name}: max ratio {worst:.4g} <= bound {bound:.4g}")
    acceptance_report(6, total == 0, f"{total} violations over 3x10^4 pairs per net; " + "; ".join(lines))
    assert total == 0


# ---------------------------------------------------------------------------
# 7: loss manifolds
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def manifolds():
    dirs = fibonacci_sphere(100_000)
    out = {}
    for loss in ("l1", "l2", "cosine"):
        found = manifold_minima(loss, dirs)
        ang = np.arccos(np.clip(found @ AXES.T, -1, 1))
        out[loss] = {
            "count": len(found),
            "at_axes": bool(len(found) == 6 and (ang.min(0) < 1e-4).all() and (ang.min(1) < 1e-4).all()),
        }
    h = 1e-3
    probe = np.array([[math.sin(h), 0, math.cos(h)], [0, math.sin(h), math.cos(h)], [math.cos(h), math.sin(h), 0]])
    out["slope_ratio"] = float((manifold_loss("l1", probe) / manifold_loss("cosine", probe)).min())
    return out


def _criterion_07_parts(m):
    return {loss: m[loss]["at_axes"] for loss in ("l1", "l2", "cosine")} | {"slope": m["slope_ratio"] > 1}


@pytest.mark.xfail(strict=True, reason="the L1 loss manifold has 12 further strict minima at the face diagonals")
def test_criterion_07_loss_manifolds(acceptance_report, manifolds):
    parts = _criterion_07_parts(manifolds)
    counts = ", ".join(f"{k} {manifolds[k]['count']} minima" for k in ("l1", "l2", "cosine"))
    acceptance_report(7, all(parts.values()),
                      f"{counts} (want exactly 6 at the axes for each); L1/cosine slope ratio "
                      f"{manifolds['slope_ratio']:.2f} (want > 1). L1 also has strict minima at the 12 face "
                      "diagonals, so its count cannot be 6")
    assert all(parts.values())


def test_criterion_07_attainable_parts(manifolds):
    parts = _criterion_07_parts(manifolds)
    assert parts["l2"] and parts["cosine"] and parts["slope"]
    assert manifolds["l1"]["count"] == 18  # 6 axes and 12 face diagonals


# ---------------------------------------------------------------------------
# 8: crease fixture
# ---------------------------------------------------------------------------


def _crease_run(angle, lambdas):
    pts, crease = crease_cloud(angle, 5000, noise=0.02, seed=0)
    p, tr = geo.normalize(pts)
    cfg = TrainConfig.desk(noise="high", lambdas=lambdas)
    res = fit(p, cfg)
    mesh = geo.extract_mesh(res.f_net, cfg.mc_resolution).transformed(tr)
    return measure_crease(mesh, crease)


@pytest.mark.parametrize("angle", [30.0, 90.0, 120.0])
def test_criterion_08_crease(acceptance_report, angle):
    t = time.perf_counter()
    full = _crease_run(angle, {})
    ablated = _crease_run(angle, {"regularize": 0.0})
    secs = (time.perf_counter() - t) / 2
    angle_ok = abs(full.dihedral_deg - angle) <= 10
    chamfer_ok = full.crease_chamfer < ablated.crease_chamfer
    _CREASE[angle] = (angle_ok and chamfer_ok, f"{angle:.0f} deg: dihedral {full.dihedral_deg:.1f} "
                                               f"(ablation {ablated.dihedral_deg:.1f}), crease chamfer "
                                               f"{full.crease_chamfer:.4f} vs ablation {ablated.crease_chamfer:.4f}, "
                                               f"{secs:.0f} s/run")
    if len(_CREASE) == 3:
        acceptance_report(8, all(v[0] for v in _CREASE.values()),
                          "; ".join(_CREASE[a][1] for a in sorted(_CREASE)))
    assert angle_ok and chamfer_ok


_CREASE: dict[float, tuple[bool, str]] = {}


# ---------------------------------------------------------------------------
# 9: sphere end to end
# ---------------------------------------------------------------------------


def test_criterion_09_sphere(acceptance_report, sphere_run):
    mesh = sphere_run["mesh"].transformed(sphere_run["tr"])
    n = 1_000_000
    rec = geo.sample_mesh(mesh, n, seed=1)
    ref = sphere_samples(n, 1.0, seed=2)
    cd = geo.chamfer(rec, ref) * 1e3
    surf = torch.tensor(sphere_run["tr"].apply(rec[:50_000]), dtype=torch.float32)
    _, g = sphere_run["res"].f_net(surf, order=1)
    eik = float((g.detach().norm(dim=1) - 1).abs().mean())
    secs = sphere_run["seconds"]
    ok = cd < 5.0 and eik < 0.05 and secs <= 300
    acceptance_report(9, ok, f"chamfer x1e3 {cd:.2f} (want < 5, 10^6 samples per side), surface eikonal "
                             f"{eik:.4f} (want < 0.05), fit + 128^3 extraction {secs:.0f} s (want <= 300)")
    assert ok


# ---------------------------------------------------------------------------
# 10: schedule and stop-gradient contracts
# ---------------------------------------------------------------------------


def _tiny(**kw):
    base = dict(iterations=20, n_input=64, n_close=64, n_off=64, f_layers=2, f_width=16,
                u_layers=2, u_width=16, knn_k=8, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def _cross_grads(cfg, weights):
    from octafield.training import build_networks

    cloud = sphere_cloud(300, seed=0) * 0.8
    f, u = build_networks(cfg, cloud)
    rng = np.random.default_rng(0)
    p = torch.tensor(cloud[:64])
    pc = torch.tensor(sample_close(cloud, knn_sigma(cloud, 8), 64, rng))
    po = torch.tensor(sample_off(64, rng))
    w = cfg.weights()
    for k, v in weights.items():
        setattr(w, k, v)
    r = total_loss(f, u, p, pc, po, w, {k: True for k in TERMS})
    fg = torch.autograd.grad(r.total_tensor, list(f.parameters()), retain_graph=True, allow_unused=True)
    ug = torch.autograd.grad(r.total_tensor, list(u.parameters()), allow_unused=True)
    zero = lambda gs, ps: [torch.zeros_like(q) if g is None else g for g, q in zip(gs, ps)]  # noqa: E731
    return zero(fg, f.parameters()), zero(ug, u.parameters())


def test_criterion_10_schedule_and_stop_gradient(acceptance_report):
    failures = []
    for noise, (align_at, reg_at, nsh0, nsh1) in {"low": (0.4, 0.6, 3.0, 3e-4), "high": (0.2, 0.4, 3.0, 3e-3)}.items():
        cfg = _tiny(noise=noise)
        res = fit(sphere_cloud(300, seed=0) * 0.8, cfg)
        for it, r in enumerate(res.log):
            want_align = it >= math.ceil(align_at * cfg.iterations)
            want_reg = it >= math.ceil(reg_at * cfg.iterations)
            want_nsh = nsh0 if it < math.ceil(0.1 * cfg.iterations) else nsh1
            if (r.active["align"], r.active["lip"], r.active["regularize"], r.weights["nsh"]) != \
                    (want_align, want_align, want_reg, want_nsh):
                failures.append(f"{noise} iteration {it}")
            if any(r.terms[k] != 0.0 for k in TERMS if not r.active[k]):
                failures.append(f"{noise} iteration {it}: inactive term logged")
    cfg = _tiny()
    _, u1 = _cross_grads(cfg, {"regularize": 10.0})
    _, u2 = _cross_grads(cfg, {"regularize": 12345.0})
    f1, _ = _cross_grads(cfg, {"align": 100.0, "lip": 1e-6})
    f2, _ = _cross_grads(cfg, {"align": 7.0, "lip": 3.0})
    u_same = all(torch.equal(a, b) for a, b in zip(u1, u2))
    f_same = all(torch.equal(a, b) for a, b in zip(f1, f2))
    ok = not failures and u_same and f_same
    acceptance_report(10, ok, f"gating mismatches {len(failures)} over both schedules; field update independent "
                              f"of lambda_regularize: {u_same}; distance update independent of lambda_align and "
                              f"lambda_lip: {f_same} (bitwise)")
    assert ok


# ---------------------------------------------------------------------------
# 11: metrics
# ---------------------------------------------------------------------------


def test_criterion_11_metrics(acceptance_report):
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(20):
        a, b = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        tau = float(rng.uniform(0.1, 1.0))
        mismatches += geo.chamfer(a, b) != oracles.brute_chamfer(a, b)
        mismatches += geo.hausdorff(a, b) != oracles.brute_hausdorff(a, b)
        mismatches += geo.fscore(a, b, tau) != oracles.brute_fscore(a, b, tau)
    self_f = geo.fscore(a, a)
    ok = mismatches == 0 and self_f == 100.0
    acceptance_report(11, ok, f"{mismatches} inexact values over 20 random 100-point pairs; fscore(A, A) = {self_f}")
    assert ok


# ---------------------------------------------------------------------------
# 12: determinism
# ---------------------------------------------------------------------------


def test_criterion_12_determinism(acceptance_report, sphere_run):
    out = sphere_run["dir"]
    res = fit(sphere_run["pts"], sphere_run["cfg"])
    save_checkpoint(out / "b.bin", res.f_net, res.u_net)
    write_mesh(out / "b.ply", geo.extract_mesh(res.f_net, 128))
    same_ck = (out / "a.bin").read_bytes() == (out / "b.bin").read_bytes()
    same_mesh = (out / "a.ply").read_bytes() == (out / "b.ply").read_bytes()
    acceptance_report(12, same_ck and same_mesh, f"second desk-scale sphere fit: checkpoint identical {same_ck}, "
                                                 f"128^3 mesh identical {same_mesh}")
    assert same_ck and same_mesh
