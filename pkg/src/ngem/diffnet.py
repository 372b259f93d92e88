"""Dense feed-forward network with hand-written forward and backward passes.

The network maps features ``x`` to the raw mixture-head vector laid out as
``[logits (K) | means (K*Dy) | raw scales (K*Dy)]``. All parameters live in a
single flat float64 vector so optimizers can work on one array.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from ngem.errors import ConfigError, ShapeError, StateError
from ngem.mixture import SIGMA_MIN, raw_scale_for

GELU = "gelu"
IDENTITY = "identity"

_tokens = itertools.count()
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def head_width(K: int, Dy: int) -> int:
    return K + 2 * K * Dy


def gelu(v):
    """Exact GELU, ``v * Phi(v)``."""
    return v * ndtr(v)


def gelu_backward(v, upstream, cdf=None):
    # d/dv [v Phi(v)] = Phi(v) + v phi(v)
    if cdf is None:
        cdf = ndtr(v)
    d = np.multiply(v, v)
    d *= -0.5
    np.exp(d, out=d)
    d *= _INV_SQRT_2PI
    d *= v
    d += cdf
    d *= upstream
    return d


def _param_count(sizes):
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre: list  # pre-activations, one per layer
    post: list  # layer outputs, one per layer
    token: int
    cdf: list = None  # Phi(pre) for GELU layers, reused by backward

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]


@dataclass
class DenseNet:
    sizes: tuple  # [Dx, hidden..., head width]
    K: int
    Dy: int
    theta: np.ndarray
    activations: tuple = None
    scale_map = "softplus"
    token: int = field(default_factory=lambda: next(_tokens))

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or any(s <= 0 for s in self.sizes):
            raise ConfigError(f"invalid layer sizes {self.sizes}")
        if self.sizes[-1] != head_width(self.K, self.Dy):
            raise ConfigError(
                f"output width {self.sizes[-1]} != K + 2*K*Dy = {head_width(self.K, self.Dy)}"
            )
        if self.activations is None:
            n = len(self.sizes) - 1
            self.activations = (GELU,) * (n - 1) + (IDENTITY,)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (_param_count(self.sizes),):
            raise ShapeError(
                f"expected {_param_count(self.sizes)} parameters, got {self.theta.shape}"
            )
        self.weights, self.biases = _views(self.theta, self.sizes)

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    def with_params(self, theta) -> "DenseNet":
        return DenseNet(self.sizes, self.K, self.Dy, np.array(theta, dtype=np.float64),
                        self.activations)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeError(f"input shape {x.shape} does not match fan_in {self.sizes[0]}")
        pre, post, cdf = [], [], []
        h = x
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ W.T
            z += b
            if act == GELU:
                c = ndtr(z)
                h = z * c
            else:
                c, h = None, z
            pre.append(z)
            post.append(h)
            cdf.append(c)
        return h, ForwardTrace(x, pre, post, self.token, cdf)

    def backward(self, trace, d_raw):
        if trace is None or trace.token != self.token:
            raise StateError("trace does not belong to this network (stale or missing)")
        d_raw = np.asarray(d_raw, dtype=np.float64)
        if d_raw.shape != trace.post[-1].shape:
            raise ShapeError(f"d_raw shape {d_raw.shape} != output shape {trace.post[-1].shape}")
        grad = np.empty_like(self.theta)
        gW, gb = _views(grad, self.sizes)
        delta = d_raw
        for i in reversed(range(len(self.weights))):
            if self.activations[i] == GELU:
                delta = gelu_backward(trace.pre[i], delta, trace.cdf[i])
            inp = trace.post[i - 1] if i > 0 else trace.x
            gW[i][...] = delta.T @ inp
            gb[i][...] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.weights[i]
        return grad


def _views(flat, sizes):
    weights, biases = [], []
    off = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[off:off + fan_in * fan_out].reshape(fan_out, fan_in))
        off += fan_in * fan_out
        biases.append(flat[off:off + fan_out])
        off += fan_out
    return weights, biases


@dataclass
class FreeMixture:
    """Mixture parameters fitted directly, shared by every input (no network).

    The scale block holds sigma itself; ``with_params`` projects it back onto
    ``sigma >= SIGMA_MIN`` after each update.
    """

    scale_map = "identity"

    K: int
    Dy: int
    theta: np.ndarray
    input_dim: int = 1
    token: int = field(default_factory=lambda: next(_tokens))

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64)
        if self.theta.shape != (head_width(self.K, self.Dy),):
            raise ShapeError(f"expected {head_width(self.K, self.Dy)} parameters")

    @property
    def n_params(self) -> int:
        return self.theta.size

    def with_params(self, theta) -> "FreeMixture":
        theta = np.array(theta, dtype=np.float64)
        np.maximum(theta[self.K + self.K * self.Dy:], SIGMA_MIN, out=theta[self.K + self.K * self.Dy:])
        return FreeMixture(self.K, self.Dy, theta, self.input_dim)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        raw = np.broadcast_to(self.theta, (x.shape[0], self.theta.size)).copy()
        return raw, ForwardTrace(x, [], [raw], self.token)

    def backward(self, trace, d_raw):
        if trace is None or trace.token != self.token:
            raise StateError("trace does not belong to this model (stale or missing)")
        d_raw = np.asarray(d_raw, dtype=np.float64)
        if d_raw.shape != trace.post[-1].shape:
            raise ShapeError(f"d_raw shape {d_raw.shape} != output shape {trace.post[-1].shape}")
        return d_raw.sum(axis=0)


def init_net(layer_sizes, K: int, Dy: int, seed: int) -> DenseNet:
    """He-uniform weights, zero biases, and a scale bias giving sigma close to 1.

    The logit rows of the head are zero, so the initial mixture weights are uniform.

    ``layer_sizes`` is ``[Dx, hidden...]``; the head layer is appended.
    """
    layer_sizes = [int(s) for s in layer_sizes]
    if not layer_sizes or any(s <= 0 for s in layer_sizes) or K < 1 or Dy < 1:
        raise ConfigError(f"invalid architecture sizes={layer_sizes} K={K} Dy={Dy}")
    sizes = layer_sizes + [head_width(K, Dy)]
    rng = np.random.default_rng(seed)
    theta = np.zeros(_param_count(sizes))
    weights, biases = _views(theta, sizes)
    for W in weights:
        bound = np.sqrt(6.0 / W.shape[1])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    # logit rows start at zero so pi is uniform for every input
    weights[-1][:K] = 0.0
    biases[-1][K + K * Dy:] = raw_scale_for(1.0)
    return DenseNet(sizes, K, Dy, theta)


def init_free_mixture(K: int, Dy: int, seed: int, input_dim: int = 1) -> FreeMixture:
    """Means i.i.d. N(0, 1), sigma = 1, uniform weights."""
    if K < 1 or Dy < 1:
        raise ConfigError(f"invalid K={K} Dy={Dy}")
    rng = np.random.default_rng(seed)
    theta = np.zeros(head_width(K, Dy))
    theta[K:K + K * Dy] = rng.standard_normal(K * Dy)
    theta[K + K * Dy:] = 1.0
    return FreeMixture(K, Dy, theta, input_dim)


def forward(net, x):
    return net.forward(x)


def backward(net, trace, d_raw):
    return net.backward(trace, d_raw)


_MAGIC = b"MDN1"


def save_checkpoint(model, path) -> None:
    """Write ``model`` as header + little-endian float64 parameter vector.

    Header: magic, uint32 number of layer sizes (0 for a free mixture), the
    sizes, K, Dy, input dim.
    """
    sizes = list(model.sizes[:-1]) if isinstance(model, DenseNet) else []
    header = _MAGIC + struct.pack(f"<{len(sizes) + 4}I", len(sizes), *sizes,
                                  model.K, model.Dy, model.input_dim)
    Path(path).write_bytes(header + model.theta.astype("<f8").tobytes())


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ShapeError(f"{path}: not an .mdn checkpoint")
    (n,) = struct.unpack_from("<I", blob, 4)
    fields = struct.unpack_from(f"<{n + 3}I", blob, 8)
    sizes, (K, Dy, input_dim) = list(fields[:n]), fields[n:]
    theta = np.frombuffer(blob, dtype="<f8", offset=8 + 4 * (n + 3)).astype(np.float64)
    if n == 0:
        return FreeMixture(K, Dy, theta, input_dim)
    return DenseNet(sizes + [head_width(K, Dy)], K, Dy, theta)
