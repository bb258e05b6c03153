"""Sampling, loss scheduling and the joint optimisation loop."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from scipy.spatial import cKDTree

from .losses import TERMS, LossReport, LossWeights, total_loss
from .nets import LipNet, SineNet, lipnet_init, save_checkpoint, siren_init

__all__ = [
    "Schedule",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "knn_sigma",
    "sample_close",
    "sample_off",
    "build_networks",
    "init_radius",
    "TrainingDiverged",
    "FitResult",
    "fit",
]

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class Schedule:
    """Loss gating and weight changes as fractions of the iteration budget."""

    positional: float
    nsh_initial: float
    nsh_annealed: float
    anneal_at: float
    align_at: float
    regularize_at: float

    @classmethod
    def low_noise(cls) -> "Schedule":
        return cls(7000.0, 3.0, 3e-4, 0.1, 0.4, 0.6)

    @classmethod
    def high_noise(cls) -> "Schedule":
        return cls(3500.0, 3.0, 3e-3, 0.1, 0.2, 0.4)

    @classmethod
    def for_noise(cls, noise: str) -> "Schedule":
        if noise == "low":
            return cls.low_noise()
        if noise == "high":
            return cls.high_noise()
        raise ValueError(f"noise regime must be 'low' or 'high', got {noise!r}")

    def state(self, iteration: int, iterations: int) -> tuple[dict[str, bool], float]:
        """Active terms and the current NSH weight at ``iteration``.

        Milestones are compared in integer iterations, so a term switches on
        exactly at ``ceil(fraction * iterations)``.
        """
        def reached(frac):
            return iteration >= math.ceil(frac * iterations - 1e-9)

        align_on = reached(self.align_at)
        active = {
            "positional": True, "eikonal": True, "off": True, "nsh": True,
            "align": align_on, "lip": align_on,
            "regularize": reached(self.regularize_at),
        }
        nsh = self.nsh_annealed if reached(self.anneal_at) else self.nsh_initial
        return active, nsh


@dataclass
class TrainConfig:
    """Everything that determines a fit. ``lambdas`` overrides individual loss weights."""

    iterations: int = 10000
    n_input: int = 15000
    n_close: int = 15000
    n_off: int = 15000
    lr: float = 5e-5
    lr_final: float | None = None
    seed: int = 0
    noise: str = "low"
    mc_resolution: int = 512
    alpha: float = 100.0
    lambdas: dict[str, float] = field(default_factory=dict)
    f_layers: int = 4
    f_width: int = 256
    omega0: float = 30.0
    f_input_scale: float = 1.0
    f_init: str = "geometric"
    f_init_radius: float | str = "auto"
    u_layers: int = 4
    u_width: int = 256
    u_input_scale: float = 100.0
    u_activation: str = "tanh"
    knn_k: int = 51
    dtype: str = "float32"
    checkpoint_every: int = 0

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        base = dict(iterations=2000, n_input=2048, n_close=2048, n_off=2048, lr=1e-4, lr_final=1e-6,
                    mc_resolution=128, f_layers=2, f_width=128, u_layers=2, u_width=128)
        base.update(kw)
        return cls(**base)

    @classmethod
    def preset(cls, name: str, **kw) -> "TrainConfig":
        if name == "full":
            return cls.full(**kw)
        if name == "desk":
            return cls.desk(**kw)
        raise ValueError(f"unknown preset {name!r}")

    def schedule(self) -> Schedule:
        return Schedule.for_noise(self.noise)

    def weights(self) -> LossWeights:
        sched = self.schedule()
        w = LossWeights(positional=sched.positional, nsh=sched.nsh_initial, alpha=self.alpha)
        for k, v in self.lambdas.items():
            if k not in TERMS:
                raise ValueError(f"unknown loss weight {k!r}")
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {k} must be a nonnegative finite number")
            setattr(w, k, float(v))
        return w

    def validate(self) -> None:
        for name in ("iterations", "n_input", "n_close", "n_off", "f_layers", "f_width",
                     "u_layers", "u_width", "knn_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_final is not None and not 0 <= self.lr_final <= self.lr:
            raise ValueError("lr_final must lie in [0, lr]")
        r = self.f_init_radius
        if not (r == "auto" or (isinstance(r, (int, float)) and 0 < r < 1)):
            raise ValueError("f_init_radius must be 'auto' or a number in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.schedule()
        self.weights()

    def lr_at(self, iteration: int) -> float:
        """Constant ``lr``, or a cosine decay to ``lr_final`` over the run when that is set."""
        if self.lr_final is None or self.iterations < 2:
            return self.lr
        t = iteration / (self.iterations - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + math.cos(math.pi * t))

    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def knn_sigma(cloud, k: int = 51) -> np.ndarray:
    """Distance from each point to its ``k``-th nearest neighbour, the point itself counted first."""
    cloud = np.asarray(cloud, dtype=float)
    if len(cloud) < k:
        raise ValueError(f"need at least k={k} points, got {len(cloud)}")
    d, _ = cKDTree(cloud).query(cloud, k=[k])
    return np.maximum(d[:, 0], SIGMA_FLOOR)


def sample_close(cloud, sigmas, n: int, rng: np.random.Generator) -> np.ndarray:
    """Random cloud points jittered by isotropic Gaussians of their own sigma."""
    cloud = np.asarray(cloud, dtype=float)
    idx = rng.integers(0, len(cloud), size=n)
    return cloud[idx] + rng.standard_normal((n, 3)) * np.asarray(sigmas)[idx, None]


def sample_off(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples in the normalised cube ``[-1, 1]^3``."""
    return rng.uniform(-1.0, 1.0, size=(n, 3))


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: list[tuple[int, int]] = field(default_factory=list)  # (step, tensor index)

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """One in-place Adam update. Tensors with non-finite gradients are left alone."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient {i} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            if not bool(torch.isfinite(g).all()):
                state.skipped.append((t, i))
                continue
            m, v = state.m[i], state.v[i]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return state


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    """Raised when the total loss becomes non-finite."""

    def __init__(self, iteration: int, checkpoint: str | None):
        self.iteration, self.checkpoint = iteration, checkpoint
        where = f"; state saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"total loss is not finite at iteration {iteration}{where}")


@dataclass
class FitResult:
    f_net: SineNet
    u_net: LipNet
    log: list[LossReport]
    config: TrainConfig

    def log_text(self) -> str:
        lines = [LossReport.header()] + [r.as_row(i) for i, r in enumerate(self.log)]
        return "\n".join(lines) + "\n"


def init_radius(config: TrainConfig, cloud=None) -> float:
    """Radius of the starting sphere; ``"auto"`` uses the mean distance of the cloud from the origin."""
    if config.f_init_radius != "auto":
        return float(config.f_init_radius)
    if cloud is None or len(cloud) == 0:
        return 0.5
    r = float(np.linalg.norm(np.asarray(cloud, dtype=float), axis=1).mean())
    return min(max(r, 0.1), 0.95)


def build_networks(config: TrainConfig, cloud=None) -> tuple[SineNet, LipNet]:
    dtype = config.torch_dtype()
    f = siren_init(config.f_layers, config.f_width, seed=config.seed, omega0=config.omega0,
                   input_scale=config.f_input_scale, dtype=dtype, scheme=config.f_init,
                   radius=init_radius(config, cloud))
    u = lipnet_init(config.u_layers, config.u_width, seed=config.seed + 1,
                    input_scale=config.u_input_scale, activation=config.u_activation, dtype=dtype)
    return f, u


def fit(cloud, config: TrainConfig, nets: tuple[SineNet, LipNet] | None = None,
        callback: Callable[[int, LossReport], None] | None = None,
        diagnostic_path: str | None = None) -> FitResult:
    """Fit the SDF and the octahedral field to a normalised point cloud."""
    config.validate()
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) cloud, got shape {cloud.shape}")
    dtype = config.torch_dtype()
    f_net, u_net = nets if nets is not None else build_networks(config, cloud)
    rng = np.random.default_rng(config.seed)
    sigmas = knn_sigma(cloud, min(config.knn_k, len(cloud)))
    schedule = config.schedule()
    weights = config.weights()
    nsh_override = "nsh" in config.lambdas

    params = list(f_net.parameters()) + list(u_net.parameters())
    opt = AdamState.zeros_like(params)
    log: list[LossReport] = []

    def as_t(a):
        return torch.as_tensor(a, dtype=dtype)

    for it in range(config.iterations):
        active, nsh = schedule.state(it, config.iterations)
        if not nsh_override:
            weights.nsh = nsh
        if len(cloud) > config.n_input:
            p = cloud[rng.choice(len(cloud), size=config.n_input, replace=False)]
        else:
            p = cloud
        p_close = sample_close(cloud, sigmas, config.n_close, rng)
        p_off = sample_off(config.n_off, rng)

        report = total_loss(f_net, u_net, as_t(p), as_t(p_close), as_t(p_off), weights, active)
        if not math.isfinite(report.total):
            path = None
            if diagnostic_path is not None:
                save_checkpoint(diagnostic_path, f_net, u_net, {"diverged_at": it})
                path = str(diagnostic_path)
            raise TrainingDiverged(it, path)
        grads = torch.autograd.grad(report.total_tensor, params, allow_unused=True)
        adam_step(params, grads, opt, config.lr_at(it))
        report.total_tensor = None
        log.append(report)
        if callback is not None:
            callback(it, report)
    return FitResult(f_net, u_net, log, config)
