"""Training losses for the joint SDF / octahedral field fit.

Stop-gradients are explicit: the alignment term only sees detached SDF
values and gradients, the regularisation term only sees detached field
outputs. All terms are batch means.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch

from .octahedral import _DESCRIPTOR_SCALE, sh_band4

__all__ = [
    "LossWeights",
    "LossReport",
    "project_normal_batch",
    "align_term",
    "regularize_term",
    "align_loss",
    "regularize_loss",
    "lip_loss",
    "nsh_loss",
    "eikonal_loss",
    "nsh_term",
    "eikonal_term",
    "positional_term",
    "off_surface_term",
    "positional_loss",
    "off_surface_loss",
    "det3",
    "total_loss",
    "TERMS",
]

TERMS = ("align", "regularize", "lip", "nsh", "eikonal", "positional", "off")

_S7 = math.sqrt(7.0 / 12.0)
_S5 = math.sqrt(5.0 / 12.0)
_ZONAL_Y40 = 2.0 * math.sqrt(math.pi) / 3.0
_ZONAL4 = (2.0 * math.sqrt(math.pi) / 3.0) * (16.0 * math.sqrt(math.pi) / 105.0) / _DESCRIPTOR_SCALE
_C8, _S8 = math.cos(math.pi / 8), math.sin(math.pi / 8)


@dataclass
class LossWeights:
    align: float = 100.0
    regularize: float = 10.0
    lip: float = 1e-6
    nsh: float = 3.0
    eikonal: float = 50.0
    positional: float = 7000.0
    off: float = 100.0
    alpha: float = 100.0

    def weight(self, term: str) -> float:
        return getattr(self, term)


@dataclass
class LossReport:
    """Per-term values for one evaluation, plus the weighted total."""

    terms: dict[str, float]
    weights: dict[str, float]
    active: dict[str, bool]
    total: float
    skipped: dict[str, int] = field(default_factory=dict)
    total_tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def recompute_total(self) -> float:
        return sum(self.weights[k] * self.terms[k] for k in TERMS if self.active[k])

    def as_row(self, iteration: int) -> str:
        vals = " ".join(f"{self.terms[k]:.9e}" for k in TERMS)
        return f"{iteration} {vals} {self.total:.9e}"

    @staticmethod
    def header() -> str:
        return "iteration " + " ".join(TERMS) + " total"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("total_tensor")
        return d


def _frame_basis(n: torch.Tensor):
    """Columns 4, 0 and 8 of the Wigner matrix of the minimal rotation z -> n.

    Built from band-4 zonal harmonics at the rotated axes, so the result is a
    polynomial (hence differentiable) function of ``n``. ``n`` is first flipped
    into the upper hemisphere, which leaves the set of n-aligned frames intact.
    """
    n = torch.where(n[:, 2:3] < 0, -n, n)
    nx, ny, c = n[:, 0], n[:, 1], n[:, 2]
    k = 1.0 / (1.0 + c)
    a = torch.stack([1 - nx * nx * k, -nx * ny * k, -nx], dim=-1)
    b = torch.stack([-nx * ny * k, 1 - ny * ny * k, -ny], dim=-1)
    a2 = _C8 * a + _S8 * b
    b2 = -_S8 * a + _C8 * b
    yn = sh_band4(n)
    b4 = _ZONAL_Y40 * yn
    q_twist0 = _ZONAL4 * (sh_band4(a) + sh_band4(b) + yn)
    q_twist8 = _ZONAL4 * (sh_band4(a2) + sh_band4(b2) + yn)
    b8 = (q_twist0 - _S7 * b4) / _S5
    b0 = (q_twist8 - _S7 * b4) / _S5
    return b4, b0, b8


def project_normal_batch(q: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    """Closest n-aligned frame to each row of ``q`` (both ``(B, .)`` tensors).

    Differentiable in both arguments. Rows with an undetermined twist get
    the twist-0 frame.
    """
    b4, b0, b8 = _frame_basis(n)
    p0 = (b0 * q).sum(-1)
    p8 = (b8 * q).sum(-1)
    r2 = p0 * p0 + p8 * p8
    degenerate = r2 < 1e-24
    p0 = torch.where(degenerate, torch.ones_like(p0), p0)
    p8 = torch.where(degenerate, torch.zeros_like(p8), p8)
    r = torch.sqrt(p0 * p0 + p8 * p8)
    return _S7 * b4 + _S5 * (p0[:, None] * b0 + p8[:, None] * b8) / r[:, None]


def _unit(v: torch.Tensor, eps: float = 1e-8):
    norm = v.norm(dim=-1)
    ok = norm > eps
    return v / norm.clamp_min(eps)[:, None], ok


def align_term(q: torch.Tensor, f_val: torch.Tensor, f_grad: torch.Tensor):
    """Distance-weighted cosine misalignment of ``q`` with the normal frames.

    ``f_val`` and ``f_grad`` are detached here. Returns ``(loss, n_skipped)``.
    """
    f_val, f_grad = f_val.detach(), f_grad.detach()
    n, ok_n = _unit(f_grad)
    q_unit, ok_q = _unit(q)
    ok = ok_n & ok_q
    if not bool(ok.any()):
        raise ValueError("align loss: every sample has a degenerate SDF gradient or field value")
    q, q_unit, n, f_val = q[ok], q_unit[ok], n[ok], f_val[ok]
    target = project_normal_batch(q, n)
    beta = torch.exp(-100.0 * f_val.abs())
    cos = (q_unit * target).sum(-1)
    return (beta * (1.0 - cos)).mean(), int((~ok).sum())


def regularize_term(q: torch.Tensor, f_grad: torch.Tensor):
    """L1 distance between the normalised field and its projection onto the
    frames aligned with the SDF normal. ``q`` is detached here."""
    q = q.detach()
    n, ok_n = _unit(f_grad)
    q_unit, ok_q = _unit(q)
    ok = ok_n & ok_q
    if not bool(ok.any()):
        return f_grad.sum() * 0.0, int((~ok).sum())
    target = project_normal_batch(q[ok], n[ok])
    return (q_unit[ok] - target).abs().sum(-1).mean(), int((~ok).sum())


def align_loss(u_net, f_net, pts: torch.Tensor) -> torch.Tensor:
    """Alignment loss with the SDF network frozen."""
    with torch.no_grad():
        v, g = f_net(pts, order=1)
    return align_term(u_net(pts), v, g)[0]


def regularize_loss(u_net, f_net, pts: torch.Tensor) -> torch.Tensor:
    """Sharp-edge regularisation loss with the field network frozen."""
    with torch.no_grad():
        q = u_net(pts)
    _, g = f_net(pts, order=1)
    return regularize_term(q, g)[0]


def lip_loss(u_net) -> torch.Tensor:
    return u_net.lipschitz_bound()


def det3(H: torch.Tensor) -> torch.Tensor:
    """Determinant of a batch of 3x3 matrices, expanded along the first row."""
    return (
        H[:, 0, 0] * (H[:, 1, 1] * H[:, 2, 2] - H[:, 1, 2] * H[:, 2, 1])
        - H[:, 0, 1] * (H[:, 1, 0] * H[:, 2, 2] - H[:, 1, 2] * H[:, 2, 0])
        + H[:, 0, 2] * (H[:, 1, 0] * H[:, 2, 1] - H[:, 1, 1] * H[:, 2, 0])
    )


def nsh_term(hess: torch.Tensor) -> torch.Tensor:
    return det3(hess).abs().mean()


def eikonal_term(grad: torch.Tensor):
    """Mean deviation of the gradient norm from one, skipping vanishing gradients."""
    norm = grad.norm(dim=-1)
    ok = norm > 1e-8
    if not bool(ok.any()):
        return grad.sum() * 0.0, int((~ok).sum())
    return (norm[ok] - 1.0).abs().mean(), int((~ok).sum())


def positional_term(f_val: torch.Tensor) -> torch.Tensor:
    return f_val.abs().mean()


def off_surface_term(f_off: torch.Tensor, alpha: float = 100.0) -> torch.Tensor:
    return torch.exp(-alpha * f_off.abs()).mean()


def nsh_loss(f_net, pts: torch.Tensor) -> torch.Tensor:
    """Mean absolute Hessian determinant of the SDF."""
    return nsh_term(f_net(pts, order=2)[2])


def eikonal_loss(f_net, pts: torch.Tensor) -> torch.Tensor:
    return eikonal_term(f_net(pts, order=1)[1])[0]


def positional_loss(f_net, pts: torch.Tensor) -> torch.Tensor:
    return positional_term(f_net(pts))


def off_surface_loss(f_net, pts_off: torch.Tensor, alpha: float = 100.0) -> torch.Tensor:
    return off_surface_term(f_net(pts_off), alpha)


def total_loss(f_net, u_net, p: torch.Tensor, p_close: torch.Tensor, p_off: torch.Tensor,
               weights: LossWeights, active: dict[str, bool]) -> LossReport:
    """Weighted sum of the active terms; inactive terms are reported as 0."""
    n_p = p.shape[0]
    need_eik = active["eikonal"] or active["off"]
    pts = torch.cat([p, p_off]) if need_eik else p
    v_all, g_all = f_net(pts, order=1)
    v_p, g_p = v_all[:n_p], g_all[:n_p]
    zero = v_all.sum() * 0.0
    values = {k: zero for k in TERMS}
    skipped = {"align": 0, "regularize": 0, "eikonal": 0}

    if active["positional"]:
        values["positional"] = positional_term(v_p)
    if active["eikonal"]:
        values["eikonal"], skipped["eikonal"] = eikonal_term(g_all)
    if active["off"]:
        values["off"] = off_surface_term(v_all[n_p:], weights.alpha)
    if active["nsh"]:
        _, _, H = f_net(p_close, order=2)
        values["nsh"] = nsh_term(H)
    if active["align"] or active["regularize"]:
        q = u_net(p)
        if active["align"]:
            values["align"], skipped["align"] = align_term(q, v_p, g_p)
        if active["regularize"]:
            values["regularize"], skipped["regularize"] = regularize_term(q, g_p)
    if active["lip"]:
        values["lip"] = lip_loss(u_net)

    total = zero
    for k in TERMS:
        if active[k]:
            total = total + weights.weight(k) * values[k]
    terms = {k: float(values[k].detach()) for k in TERMS}
    w = {k: weights.weight(k) for k in TERMS}
    report = LossReport(terms=terms, weights=w, active=dict(active), total=0.0, skipped=skipped,
                        total_tensor=total)
    report.total = report.recompute_total()
    return report
