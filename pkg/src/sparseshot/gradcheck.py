"""Central finite-difference checks for the loss family and the scorer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DenseLabelField
from .losses import LossParams, Variant, batch_loss
from .model import ScorerParams, backward, forward, init_params

H = 1e-5
ABS_TOL = 1e-6
REL_TOL = 1e-4
# draws whose logits sit this close to the exclusion cut are redrawn: the
# loss is discontinuous there and finite differences are meaningless
CUT_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    trials: int
    max_abs_err: float
    failures: int

    @property
    def ok(self) -> bool:
        return self.failures == 0


def within_tolerance(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) <= np.maximum(ABS_TOL, REL_TOL * np.abs(numeric))


def random_label_field(rng, shape, fg_rate=0.3) -> DenseLabelField:
    fg = rng.random(shape) < fg_rate
    labels = fg & (rng.random(shape) < 0.6)
    return DenseLabelField(labels.astype(np.uint8), fg.astype(np.uint8))


def random_loss_params(rng, variant: Variant) -> LossParams:
    return LossParams(
        variant,
        alpha=float(rng.uniform(0.1, 2.0)),
        gamma=float(rng.choice([0.0, 0.5, 1.0, 2.0, 3.0])),
        huber_delta=float(rng.uniform(0.2, 1.5)),
        symmetric_exclusion=bool(rng.random() < 0.3),
    )


def _near_cut(z, theta, symmetric):
    cuts = []
    for t in (theta, 1.0 - theta) if symmetric else (theta,):
        if 0.0 < t < 1.0:
            cuts.append(np.log(t) - np.log1p(-t))
    return any(np.any(np.abs(z - c) < CUT_MARGIN) for c in cuts)


def draw_loss_case(rng, variant: Variant, shape=(6, 6)):
    params = random_loss_params(rng, variant)
    labels = random_label_field(rng, shape)
    while True:
        z = rng.normal(0.0, 3.0, shape)
        theta = float(rng.uniform(0.0, 1.0))
        if not params.exclusive or not _near_cut(z, theta, params.symmetric_exclusion):
            return z, labels, params, theta


def numeric_logit_grad(z, labels, params, theta, h=H) -> np.ndarray:
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp = z.copy()
        zm = z.copy()
        zp[idx] += h
        zm[idx] -= h
        g[idx] = (
            batch_loss(zp, labels, params, theta).total - batch_loss(zm, labels, params, theta).total
        ) / (2 * h)
    return g


def check_loss_gradients(trials: int = 100, seed: int = 0, variants=tuple(Variant)) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for variant in variants:
        worst = 0.0
        failures = 0
        for _ in range(trials):
            z, labels, params, theta = draw_loss_case(rng, variant)
            analytic = batch_loss(z, labels, params, theta).grad_logits
            numeric = numeric_logit_grad(z, labels, params, theta)
            worst = max(worst, float(np.max(np.abs(analytic - numeric))))
            failures += int(not np.all(within_tolerance(analytic, numeric)))
        results.append(CheckResult(f"loss/{variant.value}", trials, worst, failures))
    return results


def _model_loss(image, params, labels, loss, theta):
    return batch_loss(forward(image, params), labels, loss, theta).total


def numeric_param_grad(image, params: ScorerParams, labels, loss, theta, h=H) -> np.ndarray:
    flat = params.flat()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        lp = _model_loss(image, ScorerParams.from_flat(up, params.K, params.k), labels, loss, theta)
        lm = _model_loss(image, ScorerParams.from_flat(down, params.K, params.k), labels, loss, theta)
        g[i] = (lp - lm) / (2 * h)
    return g


def draw_model_case(rng, variant: Variant, size=12, K=3, k=3):
    """Random image, parameters and labels away from relu kinks and exclusion cuts."""
    loss = random_loss_params(rng, variant)
    labels = random_label_field(rng, (size, size))
    while True:
        image = rng.uniform(0.05, 1.0, (size, size))
        params = init_params(int(rng.integers(2**31)), K, k)
        params.b1 = rng.normal(0.0, 0.3, K)
        params.b2 = float(rng.normal(0.0, 1.0))
        theta = float(rng.uniform(0.2, 1.0))
        z, (_, pre, _) = forward(image, params, return_cache=True)
        if np.min(np.abs(pre)) < 1e-3:
            continue
        if loss.exclusive and _near_cut(z, theta, loss.symmetric_exclusion):
            continue
        return image, params, labels, loss, theta


def check_model_gradients(trials: int = 3, seed: int = 0, variants=tuple(Variant)) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for variant in variants:
        worst = 0.0
        failures = 0
        for _ in range(trials):
            image, params, labels, loss, theta = draw_model_case(rng, variant)
            out = batch_loss(forward(image, params), labels, loss, theta)
            analytic = backward(image, params, out.grad_logits).flat()
            numeric = numeric_param_grad(image, params, labels, loss, theta)
            worst = max(worst, float(np.max(np.abs(analytic - numeric))))
            failures += int(not np.all(within_tolerance(analytic, numeric)))
        results.append(CheckResult(f"model/{variant.value}", trials, worst, failures))
    return results


def run_all(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    return check_loss_gradients(trials, seed) + check_model_gradients(max(1, trials // 50), seed + 1)
