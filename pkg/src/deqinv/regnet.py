"""Spectrally-normalized convolutional regularizer ``R = I + N``.

``N`` is a plain stack of same-size 3x3 convolutions with leaky-ReLU
between layers and a linear last layer. Forward, Jacobian-vector and
vector-Jacobian products are written out by hand; there is no autodiff.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _conv
from .core import TensorFormatError, make_rng, sub_seed
from .optim import Adam

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DQW1"
CHECKPOINT_VERSION = 1
# Krylov steps always taken by the projection's norm estimate (at least power_iters)
LANCZOS_STEPS = 30
# further steps allowed until the top Ritz pair converges
LANCZOS_MAX_STEPS = 150
# relative residual of the top Ritz pair of W^T W that ends the iteration
RITZ_RTOL = 1e-4
# estimates this close to 1 count as feasible, so a zero step is a no-op
PROJECT_TOL = 1e-4


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the last finite network."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class ConvLayer:
    weight: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray  # (c_out,)
    u: np.ndarray | None = None  # persistent power-iteration vector, (c_in, H, W)
    sigma: float = 0.0  # last operator-norm estimate
    # leading Ritz vectors of the last projection, (p, c_in, H, W); not saved

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]


def _as_batch(x, channels):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x, batched = x[None], False
    elif x.ndim == 4:
        batched = True
    else:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")
    if x.shape[1] != channels:
        raise ValueError(f"channel mismatch: net expects {channels}, got {x.shape[1]}")
    return x, batched


class Linearization:
    """Forward pass with stored activations, for repeated JVP/VJP at one point."""

    def __init__(self, net: "RegNet", x: np.ndarray):
        self.net = net
        xb, self.batched = _as_batch(x, net.in_channels)
        self._inputs = []  # padded layer inputs
        self._slopes = []  # activation derivative per hidden layer
        h = xb
        last = len(net.layers) - 1
        for i, layer in enumerate(net.layers):
            hp = _conv.pad(h, layer.kernel // 2)
            a = _conv.correlate_valid(hp, layer.weight) + layer.bias[None, :, None, None]
            self._inputs.append(hp)
            if i < last:
                d = np.where(a >= 0, 1.0, net.slope)
                self._slopes.append(d)
                h = a * d
            else:
                h = a
        out = xb + h if net.residual else h
        self._out = out

    def _unbatch(self, v):
        return v if self.batched else v[0]

    def _batch(self, v):
        v = np.asarray(v, dtype=np.float64)
        vb = v if self.batched else v[None]
        if vb.shape != self._out.shape:
            raise ValueError(f"shape mismatch: expected {self._out.shape[int(not self.batched):]}, got {v.shape}")
        return vb

    @property
    def output(self) -> np.ndarray:
        return self._unbatch(self._out)

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._inputs) + sum(d.nbytes for d in self._slopes)

    def jvp(self, t: np.ndarray) -> np.ndarray:
        tb = self._batch(t)
        h = tb
        last = len(self.net.layers) - 1
        for i, layer in enumerate(self.net.layers):
            a = _conv.conv_same(h, layer.weight)
            h = a * self._slopes[i] if i < last else a
        return self._unbatch(tb + h if self.net.residual else h)

    def _backward(self, ct, want_params):
        g = self._batch(ct)
        grads = []
        last = len(self.net.layers) - 1
        for i in range(last, -1, -1):
            layer = self.net.layers[i]
            if i < last:
                g = g * self._slopes[i]
            if want_params:
                gw = _conv.correlate_weight_grad(self._inputs[i], g, layer.kernel)
                grads.append((gw, g.sum(axis=(0, 2, 3))))
            g = _conv.pad_adjoint(_conv.correlate_valid_transpose(g, layer.weight), layer.kernel // 2)
        return g, grads[::-1]

    def vjp(self, ct: np.ndarray) -> np.ndarray:
        """``(dR/dx)^T ct``."""
        g, _ = self._backward(ct, want_params=False)
        if self.net.residual:
            g = g + self._batch(ct)
        return self._unbatch(g)

    def vjp_params(self, ct: np.ndarray) -> np.ndarray:
        """``(dR/dtheta)^T ct`` as a flat vector, summed over the batch."""
        _, grads = self._backward(ct, want_params=True)
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    def vjp_both(self, ct: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g, grads = self._backward(ct, want_params=True)
        if self.net.residual:
            g = g + self._batch(ct)
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        return self._unbatch(g), flat


def _tridiag(alpha: list, beta: list) -> np.ndarray:
    n = len(alpha)
    b = beta[:n - 1]
    return np.diag(alpha) + np.diag(b, 1) + np.diag(b, -1)


@dataclass
class RegNet:
    layers: list[ConvLayer]
    residual: bool = True
    slope: float = 0.1
    image_shape: tuple[int, int] = (32, 32)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ValueError("layer shapes do not chain")
        if self.layers[0].weight.shape[1] != self.layers[-1].weight.shape[0]:
            raise ValueError("first/last channel counts differ")

    @classmethod
    def create(cls, channels: int = 1, hidden: int = 32, depth: int = 6, kernel: int = 3,
               residual: bool = True, slope: float = 0.1, image_shape=(32, 32), seed: int = 0,
               init: str = "identity") -> "RegNet":
        """Build a seeded network.

        ``init="he"`` draws every layer He-style; ``"identity"`` zeroes the last
        layer so ``N = 0`` at start; ``"zeros"`` zeroes all weights. A
        spectral projection follows so every layer starts 1-Lipschitz.
        """
        if init not in ("he", "identity", "zeros"):
            raise ValueError(f"unknown init {init!r}")
        rng = make_rng(seed)
        sizes = [channels] + [hidden] * (depth - 1) + [channels]
        layers = []
        for i, (cin, cout) in enumerate(zip(sizes, sizes[1:])):
            std = np.sqrt(2.0 / (cin * kernel * kernel))
            w = rng.standard_normal((cout, cin, kernel, kernel)) * std
            if init == "zeros" or (init == "identity" and i == depth - 1):
                w = np.zeros_like(w)
            layers.append(ConvLayer(w, np.zeros(cout)))
        net = cls(layers, residual=residual, slope=slope, image_shape=tuple(image_shape))
        net.spectral_project(seed=seed)
        return net

    @property
    def in_channels(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.layers[-1].weight.shape[0]

    def copy(self) -> "RegNet":
        return copy.deepcopy(self)

    # -- evaluation ------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, batched = _as_batch(x, self.in_channels)
        h = xb
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            a = _conv.conv_same(h, layer.weight) + layer.bias[None, :, None, None]
            h = np.where(a >= 0, a, self.slope * a) if i < last else a
        out = xb + h if self.residual else h
        return out if batched else out[0]

    __call__ = forward

    def linearize(self, x: np.ndarray) -> Linearization:
        return Linearization(self, x)

    def vjp_input(self, x, cotangent):
        return self.linearize(x).vjp(cotangent)

    def vjp_params(self, x, cotangent):
        return self.linearize(x).vjp_params(cotangent)

    def jvp(self, x, tangent):
        return self.linearize(x).jvp(tangent)

    # -- parameters ------------------------------------------------------

    def param_layout(self) -> list[tuple[str, tuple, int]]:
        """(name, shape, offset) for every weight and bias in flat order."""
        layout, off = [], 0
        for i, layer in enumerate(self.layers):
            for name, arr in (("weight", layer.weight), ("bias", layer.bias)):
                layout.append((f"layer{i}.{name}", arr.shape, off))
                off += arr.size
        return layout

    @property
    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def get_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params:
            raise ValueError(f"expected {self.num_params} parameters, got {flat.size}")
        off = 0
        for layer in self.layers:
            n = layer.weight.size
            layer.weight = flat[off:off + n].reshape(layer.weight.shape).copy()
            off += n
            layer.bias = flat[off:off + layer.bias.size].copy()
            off += layer.bias.size

    # -- spectral normalization -----------------------------------------

    def _layer_power(self, layer: ConvLayer, u: np.ndarray, iters: int):
        w = layer.weight
        for _ in range(iters):
            u = _conv.conv_same_adjoint(_conv.conv_same(u, w), w)
            nu = np.linalg.norm(u)
            if nu == 0.0:
                return u, 0.0
            u = u / nu
        return u, float(np.linalg.norm(_conv.conv_same(u, w)))

    def _layer_lanczos(self, layer: ConvLayer, u: np.ndarray, steps: int):
        """Top singular pair of a layer by Lanczos on ``W^T W``.

        Returns ``(v, sigma)``.

        Plain power iteration stalls on the clustered top spectrum of a
        convolution. At least ``steps`` steps always run; after that the
        iteration continues, up to
        ``LANCZOS_MAX_STEPS``, until the top Ritz pair's residual is below
        ``RITZ_RTOL``. Single-channel layers have the flattest peaks and need it.
        """
        w = layer.weight
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return u, 0.0
        limit = max(steps, LANCZOS_MAX_STEPS)
        basis = np.empty((limit, u.size))
        basis[0] = (u / nu).ravel()
        alpha, beta = [], []
        for j in range(limit):
            q = basis[j].reshape(u.shape)
            z = _conv.conv_same_adjoint(_conv.conv_same(q, w), w).ravel()
            alpha.append(float(basis[j] @ z))
            # full reorthogonalization; a second pass only when the first
            # cancelled most of z ("twice is enough")
            Q = basis[:j + 1]
            before = np.linalg.norm(z)
            z = z - Q.T @ (Q @ z)
            nz = np.linalg.norm(z)
            if nz < 0.7 * before:
                z = z - Q.T @ (Q @ z)
                nz = np.linalg.norm(z)
            if j == limit - 1 or nz <= 1e-12 * max(abs(alpha[0]), 1e-300):
                break
            if j + 1 >= steps and (j + 1 - steps) % 5 == 0:
                theta, s = np.linalg.eigh(_tridiag(alpha, beta))
                if nz * abs(s[-1, -1]) <= RITZ_RTOL * theta[-1]:
                    break
            beta.append(nz)
            basis[j + 1] = z / nz
        n = len(alpha)
        top = np.linalg.eigh(_tridiag(alpha, beta))[1][:, -1]
        v = (top @ basis[:n]).reshape(u.shape)
        v /= np.linalg.norm(v)
        return v, float(np.linalg.norm(_conv.conv_same(v, w)))

    def spectral_project(self, power_iters: int = 5, seed: int = 0) -> list[float]:
        """Rescale each layer by ``1 / max(1, sigma)``.

        ``sigma`` is the layer's operator norm at ``image_shape``, estimated by
        Lanczos iteration (a Krylov-accelerated power iteration) from a seeded
        random start, run for at least ``max(power_iters, LANCZOS_STEPS)``
        steps. The start is deliberately not the vector kept from the last
        call: after a step the top mode is often a different one (frequently
        localized at the image border), and a start concentrated on the old
        mode's near-degenerate neighbours hides it from a short Krylov run.
        Layers within ``PROJECT_TOL`` of the bound are left untouched.
        Returns the pre-projection estimates.
        """
        rng = make_rng(seed)
        sigmas = []
        for layer in self.layers:
            shape = (1, layer.weight.shape[1], *self.image_shape)
            u = rng.standard_normal(shape)
            u, sigma = self._layer_lanczos(layer, u, max(power_iters, LANCZOS_STEPS))
            if sigma > 1.0 + PROJECT_TOL:
                layer.weight = layer.weight / sigma
            layer.u = u[0]
            layer.sigma = min(sigma, 1.0)
            sigmas.append(sigma)
        return sigmas

    def tangent_gradient(self, grad: np.ndarray, tol: float = 1e-3) -> np.ndarray:
        """Drop the part of ``grad`` that would only grow a saturated layer's norm.

        For each layer whose norm sits at the bound, the component of the
        weight gradient along ``d sigma / d W`` (from the stored power vector)
        is removed when descent would increase ``sigma``. The projection that
        follows each step would undo that component anyway, and with Adam's
        per-coordinate scaling the leftover step is not a descent direction.
        """
        grad = np.array(grad, dtype=np.float64)
        off = 0
        for layer in self.layers:
            n = layer.weight.size
            if layer.u is not None and layer.sigma >= 1.0 - tol:
                u = layer.u[None]
                k = layer.kernel
                out = _conv.conv_same(u, layer.weight)
                ds = _conv.correlate_weight_grad(_conv.pad(u, k // 2), out, k).ravel()
                g = grad[off:off + n]
                d = float(g @ ds)
                nds = float(ds @ ds)
                if d < 0 and nds > 0:
                    grad[off:off + n] = g - (d / nds) * ds
            off += n + layer.bias.size
        return grad

    def layer_norms(self, iters: int = 200, seed: int = 12345) -> list[float]:
        """Operator norms from fresh random starts (independent of stored state)."""
        rng = make_rng(seed)
        out = []
        for layer in self.layers:
            u = rng.standard_normal((1, layer.weight.shape[1], *self.image_shape))
            u /= np.linalg.norm(u)
            out.append(self._layer_power(layer, u, iters)[1])
        return out

    def layerwise_bound(self) -> float:
        """Product of per-layer norm estimates; leaky-ReLU is 1-Lipschitz."""
        act = max(1.0, abs(self.slope))
        prod = float(np.prod([l.sigma for l in self.layers])) * act ** (len(self.layers) - 1)
        return prod if self.residual else 1.0 + prod


def regnet_forward(net: RegNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def regnet_vjp_input(net: RegNet, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    return net.vjp_input(x, cotangent)


def regnet_vjp_params(net: RegNet, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    return net.vjp_params(x, cotangent)


def spectral_project(net: RegNet, power_iters: int = 5) -> RegNet:
    net.spectral_project(power_iters)
    return net


@dataclass
class LipschitzEstimate:
    epsilon: float
    layerwise_bound: float
    per_probe: list[float]


def lipschitz_estimate(net: RegNet, probes=64, power_iters: int = 100,
                       seed: int = 0) -> LipschitzEstimate:
    """Estimate the Lipschitz constant of ``R - I``.

    For a residual net this is the Lipschitz constant of ``N``. Each probe's
    local Jacobian norm comes from power iteration with paired JVP/VJP; the
    estimate is the maximum over probes. ``probes`` is a count (uniform
    random images) or an array of probe images.
    """
    rng = make_rng(seed)
    if isinstance(probes, (int, np.integer)):
        x = rng.uniform(0.0, 1.0, (int(probes), net.in_channels, *net.image_shape))
    else:
        x = np.asarray(probes, dtype=np.float64)
    lin = net.linearize(x)
    n = x.shape[0]

    def d(t):
        return lin.jvp(t) - t

    def dt(s):
        return lin.vjp(s) - s

    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v.reshape(n, -1), axis=1)[:, None, None, None]
    for _ in range(power_iters):
        w = dt(d(v))
        nw = np.linalg.norm(w.reshape(n, -1), axis=1)
        if not np.any(nw):
            break
        v = w / np.where(nw > 0, nw, 1.0)[:, None, None, None]
    norms = np.linalg.norm(d(v).reshape(n, -1), axis=1)
    act = max(1.0, abs(net.slope)) ** (len(net.layers) - 1)
    bound = float(np.prod(net.layer_norms(iters=power_iters, seed=seed + 1))) * act
    if not net.residual:
        bound += 1.0
    return LipschitzEstimate(float(norms.max()), bound, norms.tolist())


# ---------------------------------------------------------------------------
# denoiser pretraining
# ---------------------------------------------------------------------------

def pretrain_denoiser(net: RegNet, data, sigma_levels=(0.05, 0.02, 0.01), epochs: int = 10,
                      lr: float = 1e-3, batch_size: int = 8, seed: int = 0,
                      power_iters: int = 5) -> dict[float, RegNet]:
    """Train one copy of ``net`` per noise level as a Gaussian denoiser.

    Minimizes the batch-mean of ``0.5 ||R(x + sigma g) - x||^2`` with Adam,
    projecting the spectral norms after every step.
    """
    data = np.stack([np.asarray(d, dtype=np.float64) for d in data])
    if len(data) == 0:
        raise ValueError("pretraining needs data")
    family = {}
    for level_idx, sigma in enumerate(sigma_levels):
        model = net.copy()
        opt = Adam(lr)
        level_seed = seed + 7919 * level_idx
        rng = make_rng(level_seed)
        steps = 0
        for epoch in range(epochs):
            order = rng.permutation(len(data))
            total = 0.0
            for start in range(0, len(data), batch_size):
                x = data[order[start:start + batch_size]]
                noisy = x + sigma * rng.standard_normal(x.shape)
                lin = model.linearize(noisy)
                resid = lin.output - x
                loss = 0.5 * float(np.sum(resid ** 2)) / len(x)
                if not np.isfinite(loss):
                    raise TrainingDivergence(
                        f"denoiser loss diverged at sigma={sigma}, epoch {epoch}", last_good=model)
                total += loss * len(x)
                grad = lin.vjp_params(resid / len(x))
                model.set_params(opt.step(model.get_params(), model.tangent_gradient(grad)))
                steps += 1
                model.spectral_project(power_iters, seed=sub_seed(level_seed, f"project {steps}"))
            logger.info("pretrain sigma=%g epoch %d loss %.5f", sigma, epoch, total / len(data))
        model.meta = {**model.meta, "sigma": float(sigma)}
        family[float(sigma)] = model
    return family


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_HEAD = struct.Struct("<4sIIIfII")
_LAYER = struct.Struct("<IIII")


def save_checkpoint(net: RegNet, path) -> None:
    """Write the DQW1 checkpoint.

    Layout (little-endian): magic ``DQW1``; u32 version; u32 layer count;
    u32 flags (bit 0 = residual); f32 leaky-ReLU slope; u32 H; u32 W;
    then per layer u32 (c_out, c_in, kh, kw); then per layer f32 weights,
    f32 biases and the f32 spectral vector ``u`` of shape (c_in, H, W).
    """
    h, w = net.image_shape
    parts = [_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(net.layers),
                        int(net.residual), net.slope, h, w)]
    for layer in net.layers:
        parts.append(_LAYER.pack(*layer.weight.shape))
    for layer in net.layers:
        u = layer.u if layer.u is not None else np.zeros((layer.weight.shape[1], h, w))
        for arr in (layer.weight, layer.bias, u):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> RegNet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise TensorFormatError(f"{path}: truncated checkpoint header")
    magic, version, n_layers, flags, slope, h, w = _HEAD.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    off = _HEAD.size
    shapes = []
    for _ in range(n_layers):
        if len(raw) < off + _LAYER.size:
            raise TensorFormatError(f"{path}: truncated layer table")
        shapes.append(_LAYER.unpack_from(raw, off))
        off += _LAYER.size
    layers = []

    def take(count, shape):
        nonlocal off
        nbytes = 4 * count
        if len(raw) < off + nbytes:
            raise TensorFormatError(f"{path}: truncated weights")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += nbytes
        return arr.reshape(shape)

    for cout, cin, kh, kw in shapes:
        weight = take(cout * cin * kh * kw, (cout, cin, kh, kw))
        bias = take(cout, (cout,))
        u = take(cin * h * w, (cin, h, w))
        layer = ConvLayer(weight, bias, u if np.any(u) else None)
        layers.append(layer)
    if off != len(raw):
        raise TensorFormatError(f"{path}: {len(raw) - off} trailing bytes")
    net = RegNet(layers, residual=bool(flags & 1), slope=float(slope), image_shape=(h, w))
    for layer, sigma in zip(net.layers, net.layer_norms(iters=20)):
        layer.sigma = min(sigma, 1.0) if sigma > 0 else 0.0
    return net
