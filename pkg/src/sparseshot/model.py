"""Two-layer convolutional per-pixel scorer with hand-written backprop.

    logits = conv1x1(relu(conv_kxk(image) + b1)) + b2

Convolutions are cross-correlations with zero "same" padding, so the logit
field has the image's shape.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Image
from .errors import FormatError, InvalidConfig, NonFinite, ShapeError

CHECKPOINT_MAGIC = b"SSCK"
_HEADER = struct.Struct("<4sIII")


@dataclass(eq=False)
class ScorerParams:
    w1: np.ndarray  # (K, k, k)
    b1: np.ndarray  # (K,)
    w2: np.ndarray  # (K,)
    b2: float

    @property
    def K(self) -> int:
        return self.w1.shape[0]

    @property
    def k(self) -> int:
        return self.w1.shape[1]

    @property
    def size(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + 1

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def from_flat(cls, v: np.ndarray, K: int, k: int) -> "ScorerParams":
        v = np.asarray(v, dtype=np.float64)
        n1 = K * k * k
        if v.shape != (n1 + 2 * K + 1,):
            raise ShapeError(f"expected {n1 + 2 * K + 1} parameters for K={K}, k={k}, got {v.shape}")
        return cls(
            v[:n1].reshape(K, k, k).copy(),
            v[n1 : n1 + K].copy(),
            v[n1 + K : n1 + 2 * K].copy(),
            float(v[-1]),
        )

    def zeros_like(self) -> "ScorerParams":
        return ScorerParams.from_flat(np.zeros(self.size), self.K, self.k)

    def copy(self) -> "ScorerParams":
        return ScorerParams.from_flat(self.flat(), self.K, self.k)

    def __eq__(self, other):
        if not isinstance(other, ScorerParams):
            return NotImplemented
        return self.w1.shape == other.w1.shape and np.array_equal(self.flat(), other.flat())


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float
    velocity: np.ndarray

    @classmethod
    def fresh(cls, params: ScorerParams, learning_rate: float, momentum: float = 0.0) -> "OptimizerState":
        if not learning_rate >= 0:
            raise InvalidConfig("learning_rate must be non-negative")
        if not (0.0 <= momentum < 1.0):
            raise InvalidConfig("momentum must lie in [0, 1)")
        return cls(float(learning_rate), float(momentum), np.zeros(params.size))


def init_params(seed: int, K: int = 8, k: int = 5) -> ScorerParams:
    """He-style init: N(0, 2 / (k*k*fan_in)) weights, zero biases."""
    if K < 1:
        raise InvalidConfig(f"K must be >= 1, got {K}")
    if k < 1 or k % 2 == 0:
        raise InvalidConfig(f"kernel size must be odd, got {k}")
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, np.sqrt(2.0 / (k * k * 1)), (K, k, k))
    w2 = rng.normal(0.0, np.sqrt(2.0 / (1 * 1 * K)), K)
    return ScorerParams(w1, np.zeros(K), w2, 0.0)


def _pixels(image) -> np.ndarray:
    px = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    if px.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {px.shape}")
    return px


def im2col(pixels: np.ndarray, k: int) -> np.ndarray:
    """(H*W, k*k) matrix of zero-padded k x k neighbourhoods."""
    r = k // 2
    padded = np.pad(pixels, r)
    return sliding_window_view(padded, (k, k)).reshape(-1, k * k)


def _check_finite(params: ScorerParams):
    if not np.all(np.isfinite(params.flat())):
        raise NonFinite("scorer parameters contain nan or inf")


def forward(image, params: ScorerParams, cols: np.ndarray | None = None, return_cache: bool = False):
    _check_finite(params)
    px = _pixels(image)
    if cols is None:
        cols = im2col(px, params.k)
    pre = cols @ params.w1.reshape(params.K, -1).T + params.b1
    hidden = np.maximum(pre, 0.0)
    logits = (hidden @ params.w2 + params.b2).reshape(px.shape)
    if return_cache:
        return logits, (cols, pre, hidden)
    return logits


def backward(image, params: ScorerParams, grad_logits, cache=None) -> ScorerParams:
    """Parameter gradient of a scalar whose logit gradient is ``grad_logits``."""
    px = _pixels(image)
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != px.shape:
        raise ShapeError(f"gradient shape {g.shape} != logit shape {px.shape}")
    if cache is None:
        _, cache = forward(px, params, return_cache=True)
    cols, pre, hidden = cache
    g = g.reshape(-1)

    dw2 = hidden.T @ g
    db2 = float(np.sum(g))
    dpre = np.outer(g, params.w2)
    dpre[pre <= 0.0] = 0.0
    dw1 = (dpre.T @ cols).reshape(params.w1.shape)
    db1 = dpre.sum(axis=0)
    return ScorerParams(dw1, db1, dw2, db2)


def sgd_step(params: ScorerParams, grads: ScorerParams, state: OptimizerState):
    """Heavy-ball SGD: v' = momentum*v - lr*grad, params' = params + v'."""
    if grads.size != params.size or state.velocity.shape != (params.size,):
        raise ShapeError("parameter, gradient and velocity sizes disagree")
    velocity = state.momentum * state.velocity - state.learning_rate * grads.flat()
    new = params.flat() + velocity
    if not np.all(np.isfinite(new)):
        raise NonFinite("non-finite parameter after SGD update")
    return (
        ScorerParams.from_flat(new, params.K, params.k),
        OptimizerState(state.learning_rate, state.momentum, velocity),
    )


def save_checkpoint(path, params: ScorerParams) -> None:
    header = _HEADER.pack(CHECKPOINT_MAGIC, params.K, params.k, params.size)
    Path(path).write_bytes(header + params.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> ScorerParams:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, K, k, count = _HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if count != K * k * k + 2 * K + 1 or len(buf) != _HEADER.size + 8 * count:
        raise FormatError("checkpoint parameter count does not match its header")
    return ScorerParams.from_flat(np.frombuffer(buf, dtype="<f8", offset=_HEADER.size), K, k)
