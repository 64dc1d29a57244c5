"""Cross-entropy, focal, Huber and exclusive cross-entropy over logit fields.

All losses are sums over pixels and take logits, not probabilities. The
``-log p`` and ``-log(1-p)`` terms are evaluated as softplus(-z) and
softplus(z) so that saturated logits neither overflow nor lose precision.

For the exclusive variants an unannotated pixel contributes only while its
foreground probability is strictly below the threshold ``theta``; pixels
at or above it are dropped from both the total and the gradient.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .data import DenseLabelField
from .errors import InvalidConfig, NonFinite, RangeError, ShapeError


class Variant(str, enum.Enum):
    CE = "ce"
    FOCAL = "focal"
    HUBER = "huber"
    ECE = "ece"
    FOCAL_ECE = "focal-ece"


EXCLUSIVE = (Variant.ECE, Variant.FOCAL_ECE)


@dataclass(frozen=True)
class LossParams:
    variant: Variant = Variant.CE
    alpha: float = 0.25
    gamma: float = 2.0
    huber_delta: float = 1.0
    symmetric_exclusion: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.alpha > 0:
            raise InvalidConfig(f"alpha must be positive, got {self.alpha}")
        if not self.gamma >= 0:
            raise InvalidConfig(f"gamma must be non-negative, got {self.gamma}")
        if not self.huber_delta > 0:
            raise InvalidConfig(f"huber_delta must be positive, got {self.huber_delta}")

    @property
    def exclusive(self) -> bool:
        return self.variant in EXCLUSIVE


@dataclass(frozen=True, eq=False)
class LossOutput:
    total: float
    grad_logits: np.ndarray
    included_count: int
    excluded_count: int


def sigmoid(z):
    """Logistic function, stable for any finite input.

    Accepts scalars or arrays; raises NonFinite on nan or inf.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFinite("sigmoid input must be finite")
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _check_theta(theta: float) -> float:
    theta = float(theta)
    if not (0.0 <= theta <= 1.0):
        raise RangeError(f"theta must lie in [0, 1], got {theta}")
    return theta


def exclusion_mask(prob, membership, theta: float, symmetric: bool = False) -> np.ndarray:
    """True where a pixel takes part in the loss.

    FOREGROUND pixels are always included. A BACKGROUND_ASSUMED pixel is
    included iff p < theta, and additionally p > 1 - theta when
    ``symmetric``. A bound of 1 (or 0 for the lower one) is vacuous, since
    the sigmoid never reaches it even when p rounds to 1.0 in floating point.
    """
    theta = _check_theta(theta)
    prob = np.asarray(prob, dtype=np.float64)
    fg = np.asarray(membership) == 1
    if prob.shape != fg.shape:
        raise ShapeError(f"probability shape {prob.shape} != membership shape {fg.shape}")
    keep = np.ones(prob.shape, dtype=bool) if theta >= 1.0 else prob < theta
    if symmetric:
        lower = 1.0 - theta
        if lower > 0.0:
            keep &= prob > lower
    return fg | keep


def _focal_pos(z, p, alpha, gamma):
    # alpha * (1-p)^gamma * -log(p) and its derivative w.r.t. z
    q = 1.0 - p
    nll = softplus(-z)
    w = alpha * q**gamma
    return w * nll, w * (-gamma * p * nll - q)


def _focal_neg(z, p, alpha, gamma):
    # u(1-p) = alpha * p^gamma * -log(1-p) and its derivative w.r.t. z
    nll = softplus(z)
    w = alpha * p**gamma
    return w * nll, w * (gamma * (1.0 - p) * nll + p)


def _huber(r, delta):
    a = np.abs(r)
    quad = a <= delta
    value = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    dvalue = np.where(quad, r, delta * np.sign(r))
    return value, dvalue


def pixel_terms(logits, labels: DenseLabelField, params: LossParams):
    """Per-pixel loss terms and their logit derivatives, before exclusion."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != labels.shape:
        raise ShapeError(f"logit shape {z.shape} != label shape {labels.shape}")
    p = sigmoid(z)
    y = labels.labels == 1
    v = params.variant

    if v in (Variant.CE, Variant.ECE):
        pos, dpos = softplus(-z), p - 1.0
        neg, dneg = softplus(z), p
    elif v is Variant.FOCAL:
        pos, dpos = _focal_pos(z, p, params.alpha, params.gamma)
        neg, dneg = _focal_neg(z, p, params.alpha, params.gamma)
    elif v is Variant.FOCAL_ECE:
        # focal weighting only on the unannotated side
        pos, dpos = softplus(-z), p - 1.0
        neg, dneg = _focal_neg(z, p, params.alpha, params.gamma)
    else:
        dp = p * (1.0 - p)
        pos, dr = _huber(p - 1.0, params.huber_delta)
        dpos = dr * dp
        neg, dr = _huber(p, params.huber_delta)
        dneg = dr * dp

    terms = np.where(y, pos, neg)
    grads = np.where(y, dpos, dneg)
    return p, terms, grads


def batch_loss(logits, labels: DenseLabelField, params: LossParams, theta: float = 1.0) -> LossOutput:
    theta = _check_theta(theta)
    p, terms, grads = pixel_terms(logits, labels, params)
    bg = labels.background
    if params.exclusive:
        included = exclusion_mask(p, labels.membership, theta, params.symmetric_exclusion)
        terms = np.where(included, terms, 0.0)
        grads = np.where(included, grads, 0.0)
        excluded = int(np.count_nonzero(bg & ~included))
    else:
        excluded = 0
    n_bg = int(np.count_nonzero(bg))
    # np.sum reduces pairwise, so totals do not depend on evaluation order
    total = float(np.sum(terms))
    return LossOutput(total, grads, n_bg - excluded, excluded)


def bias_term(prob, true_unannotated_mask) -> float:
    """Loss mass -sum log(1 - p) charged to unannotated true positives."""
    prob = np.asarray(prob, dtype=np.float64)
    mask = np.asarray(true_unannotated_mask, dtype=bool)
    if prob.shape != mask.shape:
        raise ShapeError(f"probability shape {prob.shape} != mask shape {mask.shape}")
    return float(-np.sum(np.log1p(-prob[mask])))


def second_order_proxy(p: float, m: int, n: int) -> float:
    """p^m (1-p)^n, the shape of the background loss's second time derivative."""
    if not (0.0 <= p <= 1.0):
        raise RangeError(f"p must lie in [0, 1], got {p}")
    if m < 1 or n < 1:
        raise RangeError("exponents must be positive integers")
    return math.pow(p, m) * math.pow(1.0 - p, n)
