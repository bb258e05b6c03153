"""Coordinate networks with closed-form input derivatives.

``SineNet`` is the signed-distance network. Its forward pass carries the
input Jacobian and Hessian of every hidden layer alongside the activations,
so value, gradient and Hessian come out of one pass and parameter gradients
of any loss built from them come from a single reverse sweep.

``LipNet`` is the octahedral field network. Each layer's weights are
rescaled so their max absolute row sum never exceeds ``softplus(c_i)``,
which bounds the network's Lipschitz constant in the infinity norm by the
product of those values.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

__all__ = [
    "SineNet",
    "LipNet",
    "siren_init",
    "lipnet_init",
    "eval_f",
    "eval_u",
    "param_grad",
    "normalize_weight",
    "softplus_inverse",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1
_MAGIC = b"OCTFCKPT"

# upper-triangle pairs (00, 01, 02, 11, 12, 22) and their scatter into 3x3
_TRIU_I = [0, 0, 0, 1, 1, 2]
_TRIU_J = [0, 1, 2, 1, 2, 2]
_SYM_INDEX = [0, 1, 2, 1, 3, 4, 2, 4, 5]


def softplus_inverse(y: torch.Tensor, floor: float = -20.0) -> torch.Tensor:
    """Inverse softplus, clamped below at ``floor`` so zero maps to a finite value."""
    y = torch.as_tensor(y)
    out = torch.where(y > 20.0, y, torch.log(torch.expm1(y.clamp_min(1e-30))))
    return out.clamp_min(floor)


def normalize_weight(W: torch.Tensor, bound: torch.Tensor) -> torch.Tensor:
    """Scale rows of ``W`` so that ``||W||_inf <= bound``.

    Rows already within the bound (up to a relative 1e-12) are left untouched,
    which makes the operation idempotent bit for bit.
    """
    row_sum = W.abs().sum(dim=1, keepdim=True)
    scale = bound / row_sum.clamp_min(1e-300)
    keep = row_sum <= bound * (1.0 + 1e-12)
    return torch.where(keep, W, W * scale)


class SineNet(nn.Module):
    """Sine-activated MLP ``R^3 -> R``.

    Hidden layer ``i`` computes ``sin(omega_i * (W_i h + b_i))``; the output
    layer is linear. ``input_scale`` multiplies the input and is folded into
    the first weight matrix at initialisation, so it is recorded only as
    metadata.
    """

    def __init__(self, weights, biases, omega0: float = 30.0, first_omega: float | None = None,
                 input_scale: float = 1.0, activation: str = "sine"):
        super().__init__()
        if len(weights) != len(biases):
            raise ValueError("weights and biases differ in length")
        self.weights = nn.ParameterList([nn.Parameter(torch.as_tensor(w).clone()) for w in weights])
        self.biases = nn.ParameterList([nn.Parameter(torch.as_tensor(b).clone()) for b in biases])
        self.omega0 = float(omega0)
        self.first_omega = float(omega0 if first_omega is None else first_omega)
        self.input_scale = float(input_scale)
        if activation not in ("sine", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def _omega(self, i: int) -> float:
        if self.activation == "identity":
            return 1.0
        return self.first_omega if i == 0 else self.omega0

    def forward(self, x: torch.Tensor, order: int = 0):
        """Evaluate at points ``x`` of shape ``(B, 3)``.

        Returns ``value`` (B,) for ``order=0``, ``(value, grad)`` for
        ``order=1`` and ``(value, grad, hess)`` for ``order=2``.
        """
        # J: (3, B, n) input derivatives; K: (6, B, n) upper-triangle second derivatives
        h = x
        J = K = None
        for i in range(self.n_hidden):
            W, b, w = self.weights[i], self.biases[i], self._omega(i)
            z = w * (h @ W.T + b)
            if order >= 1:
                dz = w * (W.T[:, None, :] if J is None else J @ W.T)
            if order >= 2:
                d2z = None if K is None else w * (K @ W.T)
            if self.activation == "identity":
                h = z
                J = dz.expand(3, x.shape[0], -1) if order >= 1 else None
                K = d2z if order >= 2 else None
                continue
            s, c = torch.sin(z), torch.cos(z)
            h = s
            if order >= 2:
                K = -s * dz[_TRIU_I] * dz[_TRIU_J]
                if d2z is not None:
                    K = K + c * d2z
            if order >= 1:
                J = c * dz
        W, b = self.weights[-1], self.biases[-1]
        value = (h @ W.T + b)[:, 0]
        if order == 0:
            return value
        if J is None:
            grad = W[0].expand(x.shape[0], 3)
        else:
            grad = (J @ W[0]).T
        if order == 1:
            return value, grad
        if K is None:
            hess = torch.zeros(x.shape[0], 3, 3, dtype=x.dtype, device=x.device)
        else:
            hess = (K @ W[0]).T[:, _SYM_INDEX].reshape(-1, 3, 3)
        return value, grad, hess


class LipNet(nn.Module):
    """MLP ``R^3 -> R^9`` with per-layer infinity-norm Lipschitz bounds.

    ``c_raw[i]`` stores the softplus pre-image of the bound of layer ``i``.
    """

    def __init__(self, weights, biases, c_raw, input_scale: float = 1.0, activation: str = "tanh"):
        super().__init__()
        if not (len(weights) == len(biases) == len(c_raw)):
            raise ValueError("weights, biases and c_raw differ in length")
        self.weights = nn.ParameterList([nn.Parameter(torch.as_tensor(w).clone()) for w in weights])
        self.biases = nn.ParameterList([nn.Parameter(torch.as_tensor(b).clone()) for b in biases])
        self.c_raw = nn.ParameterList([nn.Parameter(torch.as_tensor(c).clone().reshape(())) for c in c_raw])
        self.input_scale = float(input_scale)
        if activation not in ("tanh", "elu", "relu", "sin"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    def bounds(self) -> torch.Tensor:
        return torch.stack([F.softplus(c) for c in self.c_raw])

    def lipschitz_bound(self) -> torch.Tensor:
        """Product of the per-layer bounds (the Lipschitz loss)."""
        return torch.prod(self.bounds())

    def effective_weights(self) -> list[torch.Tensor]:
        return [normalize_weight(W, F.softplus(c)) for W, c in zip(self.weights, self.c_raw)]

    def _act(self, z):
        if self.activation == "tanh":
            return torch.tanh(z)
        if self.activation == "elu":
            return F.elu(z)
        if self.activation == "relu":
            return torch.relu(z)
        return torch.sin(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        Ws = self.effective_weights()
        for i, (W, b) in enumerate(zip(Ws, self.biases)):
            h = h @ W.T + b
            if i < len(Ws) - 1:
                h = self._act(h)
        return h


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def siren_init(layers: int, width: int, seed: int, omega0: float = 30.0, input_scale: float = 1.0,
               dtype=torch.float64, scheme: str = "siren", radius: float = 0.5) -> SineNet:
    """Sine network with ``layers`` hidden layers of ``width`` units.

    ``scheme="siren"``: first layer weights uniform in +-1/3 (fan-in 3), later
    ones in +-sqrt(6/width)/omega0, biases in +-1/sqrt(fan_in).

    ``scheme="geometric"``: the initial field approximates the sphere distance
    ``||x|| - radius``. The first layer evaluates a truncated cosine series of
    ``|d . x|`` along Fibonacci directions ``d`` and later hidden layers pass
    it through almost linearly. Since ``||x||`` is twice the mean of
    ``|d . x|`` over the sphere, the output is close to a cone with unit slope
    everywhere but near the origin. A final affine calibration puts the zero
    level set at ``radius`` with unit mean radial slope there.

    ``input_scale`` premultiplies the first layer in both cases.
    """
    if layers < 2 or width < 1:
        raise ValueError("need layers >= 2 and width >= 1")
    if scheme not in ("siren", "geometric"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    g = _generator(seed)
    if scheme == "geometric":
        weights, biases = _cone_layers(layers, width, g, omega0, radius)
    else:
        dims = [3] + [width] * layers + [1]
        weights, biases = [], []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            bound = 1.0 / fan_in if i == 0 else math.sqrt(6.0 / fan_in) / omega0
            weights.append((torch.rand(fan_out, fan_in, generator=g, dtype=torch.float64) * 2 - 1) * bound)
            biases.append((torch.rand(fan_out, generator=g, dtype=torch.float64) * 2 - 1) / math.sqrt(fan_in))
    weights[0] = weights[0] * input_scale
    net = SineNet([w.to(dtype) for w in weights], [b.to(dtype) for b in biases],
                  omega0=omega0, input_scale=input_scale)
    if scheme == "geometric":
        _calibrate_sphere(net, radius)
    return net


_CONE_HARMONICS = (1, 3, 5)
_CONE_PASS = 0.3  # hidden layers after the first compute sin(0.3 h) ~ 0.3 h


def _fibonacci(n: int) -> torch.Tensor:
    k = torch.arange(n, dtype=torch.float64) + 0.5
    z = 1 - 2 * k / n
    phi = math.pi * (1 + 5 ** 0.5) * k
    rxy = torch.sqrt(1 - z * z)
    return torch.stack([rxy * torch.cos(phi), rxy * torch.sin(phi), z], 1)


def _cone_layers(layers: int, width: int, g: torch.Generator, omega0: float, radius: float):
    """Float64 weights of a sine net approximating ``||x|| - radius`` on the unit cube.

    The first layer evaluates ``cos(k pi d . x / T)`` for Fibonacci directions
    ``d`` and odd ``k``, and the output combines them through
    ``|t| = T/2 - (4T/pi^2) sum_{k odd} cos(k pi t / T) / k^2`` (``|t| <= T``).
    Units left over when ``width`` is not a multiple of the harmonic count get
    ordinary sine-net rows and zero output weight.
    """
    nk = len(_CONE_HARMONICS)
    if width < nk:
        raise ValueError(f"geometric init needs width >= {nk}")
    f64 = torch.float64
    T = math.sqrt(3.0)  # largest |d . x| on the cube
    M = width // nk
    dirs = _fibonacci(M)
    W0 = (torch.rand(width, 3, generator=g, dtype=f64) * 2 - 1) / 3
    b0 = torch.zeros(width, dtype=f64)
    c = torch.zeros(1, width, dtype=f64)
    for i, k in enumerate(_CONE_HARMONICS):
        rows = slice(i * M, (i + 1) * M)
        W0[rows] = (k * math.pi / T) * dirs / omega0
        b0[rows] = 0.5 * math.pi / omega0  # sin(z + pi/2) = cos(z)
        c[0, rows] = -(2.0 / M) * (4 * T / math.pi ** 2) / k ** 2
    weights, biases = [W0], [b0]
    for _ in range(layers - 1):
        weights.append(_CONE_PASS * torch.eye(width, dtype=f64) / omega0)
        biases.append(torch.zeros(width, dtype=f64))
    weights.append(c / _CONE_PASS ** (layers - 1))
    biases.append(torch.tensor([T - radius], dtype=f64))
    return weights, biases


def _calibrate_sphere(net: SineNet, radius: float, n: int = 256) -> None:
    """Affinely rescale the output so ``f`` is ~0 with unit radial slope at ``radius``."""
    dirs = _fibonacci(n).to(net.weights[0].dtype)
    with torch.no_grad():
        v, g = net(radius * dirs, order=1)
        slope = (g * dirs).sum(1).mean()
        offset = v.mean()
        net.weights[-1].div_(slope)
        net.biases[-1].sub_(offset).div_(slope)


def lipnet_init(layers: int, width: int, seed: int, input_scale: float = 1.0, activation: str = "tanh",
                dtype=torch.float64) -> LipNet:
    """Lipschitz MLP with ``layers`` hidden layers; bounds start at ``||W_i||_inf``."""
    if layers < 2 or width < 1:
        raise ValueError("need layers >= 2 and width >= 1")
    g = _generator(seed)
    dims = [3] + [width] * layers + [9]
    weights, biases, c_raw = [], [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = 1.0 / math.sqrt(fan_in)
        W = (torch.rand(fan_out, fan_in, generator=g, dtype=dtype) * 2 - 1) * bound
        b = (torch.rand(fan_out, generator=g, dtype=dtype) * 2 - 1) * bound
        if i == 0:
            W = W * input_scale
        weights.append(W)
        biases.append(b)
        c_raw.append(softplus_inverse(W.abs().sum(dim=1).max()))
    return LipNet(weights, biases, c_raw, input_scale=input_scale, activation=activation)


def _as_batch(x, net: nn.Module) -> tuple[torch.Tensor, bool]:
    dtype = next(net.parameters()).dtype
    t = torch.as_tensor(np.asarray(x), dtype=dtype)
    single = t.ndim == 1
    return (t[None] if single else t), single


def eval_f(net: SineNet, x):
    """Value, gradient and Hessian of ``net`` at ``x`` (one point or a batch) as numpy."""
    t, single = _as_batch(x, net)
    with torch.no_grad():
        v, g, H = net(t, order=2)
    out = (v.detach().numpy(), g.detach().numpy(), H.detach().numpy())
    if single:
        return float(out[0][0]), out[1][0], out[2][0]
    return out


def eval_u(net: LipNet, x) -> np.ndarray:
    """Raw (unnormalised) field coefficients at ``x`` as numpy."""
    t, single = _as_batch(x, net)
    with torch.no_grad():
        q = net(t).detach().numpy()
    return q[0] if single else q


def param_grad(net: nn.Module, loss: torch.Tensor) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. every parameter of ``net``, in order.

    Parameters the loss does not depend on get zero arrays.
    """
    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    return [np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy() for p, g in zip(params, grads)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _net_record(net: nn.Module) -> tuple[dict, list[np.ndarray]]:
    arrays = [p.detach().cpu().numpy() for p in net.parameters()]
    if isinstance(net, SineNet):
        meta = {"kind": "sine", "omega0": net.omega0, "first_omega": net.first_omega,
                "activation": net.activation, "n_layers": len(net.weights)}
    else:
        meta = {"kind": "lip", "activation": net.activation, "n_layers": len(net.weights)}
    meta["input_scale"] = net.input_scale
    return meta, arrays


def save_checkpoint(path, f_net: SineNet, u_net: LipNet | None = None, extra: dict | None = None) -> None:
    """Write networks to a versioned binary file.

    Layout: magic, u32 header length, JSON header, then raw little-endian
    float64 arrays in header order. Output bytes depend only on the inputs.
    """
    nets, blobs = [], []
    for net in (f_net, u_net):
        if net is None:
            continue
        meta, arrays = _net_record(net)
        meta["shapes"] = [list(a.shape) for a in arrays]
        nets.append(meta)
        blobs.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {"version": CHECKPOINT_VERSION, "nets": nets, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, dtype=torch.float64):
    """Read a checkpoint; returns ``(f_net, u_net_or_None, extra)``."""
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    offset = 12 + hlen
    nets = []
    for meta in header["nets"]:
        arrays = []
        for shape in meta["shapes"]:
            n = int(np.prod(shape)) if shape else 1
            a = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
            offset += 8 * n
            arrays.append(torch.tensor(a.copy(), dtype=dtype))
        L = meta["n_layers"]
        if meta["kind"] == "sine":
            net = SineNet(arrays[:L], arrays[L:2 * L], omega0=meta["omega0"], first_omega=meta["first_omega"],
                          input_scale=meta["input_scale"], activation=meta["activation"])
        else:
            net = LipNet(arrays[:L], arrays[L:2 * L], arrays[2 * L:3 * L], input_scale=meta["input_scale"],
                         activation=meta["activation"])
        nets.append(net)
    f_net = nets[0]
    u_net = nets[1] if len(nets) > 1 else None
    return f_net, u_net, header["extra"]
