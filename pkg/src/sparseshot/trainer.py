"""Training loops (plain and pseudo-label weak supervision) and evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .data import AnnotationSet, DenseLabelField, FOREGROUND, Image, disk_mask
from .errors import Diverged, EmptyDataset, InvalidConfig, NonFinite, ShapeError
from .losses import LossParams, Variant, batch_loss, sigmoid
from .model import OptimizerState, ScorerParams, backward, forward, im2col, init_params, sgd_step
from .schedules import ScheduleSpec, threshold_at
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    loss: LossParams = field(default_factory=LossParams)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    learning_rate: float = 6e-4
    momentum: float = 0.0
    seed: int = 0
    hidden: int = 8
    kernel: int = 5
    # if set, the output bias starts at logit(output_prior) instead of 0
    output_prior: float | None = 0.001

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        # lr == 0 is accepted as a null optimizer for testing
        if not self.learning_rate >= 0:
            raise InvalidConfig("learning_rate must be non-negative")
        if self.output_prior is not None and not (0.0 < self.output_prior < 1.0):
            raise InvalidConfig("output_prior must lie in (0, 1)")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossParams(**self.loss))
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ScheduleSpec(**self.schedule))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["variant"] = self.loss.variant.value
        d["schedule"]["kind"] = self.schedule.kind.value
        return d


@dataclass(frozen=True)
class WeakSupConfig:
    rounds: int = 3
    tau: float = 0.75
    base: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.rounds < 1:
            raise InvalidConfig("rounds must be >= 1")
        if not (0.0 < self.tau < 1.0):
            raise InvalidConfig("tau must lie in (0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.5
    min_distance: float = 7.0
    radius: float = 5.0
    target_class: int = 1


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    theta: float
    included: int
    excluded: int


@dataclass
class TrainHistory:
    records: list[StepRecord] = field(default_factory=list)
    params: ScorerParams | None = None
    # weak supervision only: the label fields each round trained on
    label_rounds: list[list[DenseLabelField]] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "theta", "included", "excluded"])
            for r in self.records:
                w.writerow([r.step, repr(r.loss), repr(r.theta), r.included, r.excluded])


def _check_dataset(dataset):
    if not dataset:
        raise EmptyDataset("training set is empty")
    for img, lbl in dataset:
        if img.shape != lbl.shape:
            raise ShapeError(f"image shape {img.shape} != label shape {lbl.shape}")


def train(dataset: Sequence[tuple[Image, DenseLabelField]], cfg: TrainConfig, init: ScorerParams | None = None):
    """One image per optimizer step; images visited in a seeded order each epoch.

    The schedule is stretched over epochs * len(dataset) steps and queried
    at the 1-based global step.
    """
    _check_dataset(dataset)
    n = len(dataset)
    total = cfg.epochs * n
    schedule = cfg.schedule.with_steps(total)
    if init is None:
        params = init_params(cfg.seed, cfg.hidden, cfg.kernel)
        if cfg.output_prior is not None:
            params.b2 = float(np.log(cfg.output_prior) - np.log1p(-cfg.output_prior))
    else:
        params = init.copy()
    state = OptimizerState.fresh(params, cfg.learning_rate, cfg.momentum)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    cols = [im2col(img.pixels, params.k) for img, _ in dataset]

    history = TrainHistory()
    step = 0
    for epoch in range(cfg.epochs):
        for i in order_rng.permutation(n):
            step += 1
            img, labels = dataset[i]
            theta = threshold_at(schedule, step)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits, cache = forward(img, params, cols=cols[i], return_cache=True)
                    out = batch_loss(logits, labels, cfg.loss, theta)
                    if not np.isfinite(out.total):
                        raise Diverged(step, "non-finite loss")
                    grads = backward(img, params, out.grad_logits, cache=cache)
                    params, state = sgd_step(params, grads, state)
            except NonFinite as exc:
                raise Diverged(step, str(exc)) from exc
            history.records.append(StepRecord(step, out.total, theta, out.included_count, out.excluded_count))
        log.debug("epoch %d: last loss %.4f", epoch + 1, history.records[-1].loss)
    history.params = params
    return params, history


def promote_pseudo_labels(labels: DenseLabelField, prob, tau: float) -> DenseLabelField:
    """Turn unannotated pixels with p > tau into positive FOREGROUND pixels."""
    prob = np.asarray(prob)
    if prob.shape != labels.shape:
        raise ShapeError("probability and label shapes differ")
    promote = labels.background & (prob > tau)
    new_labels = np.where(promote, 1, labels.labels)
    new_membership = np.where(promote, FOREGROUND, labels.membership)
    return DenseLabelField(new_labels, new_membership)


def weak_supervision_train(dataset, cfg: WeakSupConfig):
    """Repeated CE training with cumulative pseudo-positive promotion.

    Every round restarts from fresh parameters; round 0 uses the base seed so
    a single round reproduces plain CE training exactly.
    """
    _check_dataset(dataset)
    images = [img for img, _ in dataset]
    labels = [lbl for _, lbl in dataset]
    base = replace(cfg.base, loss=replace(cfg.base.loss, variant=Variant.CE))
    rounds = []
    for r in range(cfg.rounds):
        rounds.append(labels)
        seed = base.seed if r == 0 else derive_seed(base.seed, 1000 + r)
        params, history = train(list(zip(images, labels)), replace(base, seed=seed))
        if r + 1 < cfg.rounds:
            labels = [
                promote_pseudo_labels(lbl, sigmoid(forward(img, params)), cfg.tau)
                for img, lbl in zip(images, labels)
            ]
    history.label_rounds = rounds
    return params, history


def predict(params: ScorerParams, image: Image) -> np.ndarray:
    return sigmoid(forward(image, params))


def evaluate_probabilities(probs, test_set: Sequence[tuple[Image, AnnotationSet]], eval_cfg: EvalConfig) -> metrics.MetricReport:
    if not test_set:
        raise EmptyDataset("test set is empty")
    target = eval_cfg.target_class
    dices, f1s = [], []
    tp = fp = fn = 0
    class_tp: dict[int, int] = {}
    class_n: dict[int, int] = {}
    other_tp = other_n = 0

    for prob, (img, annos) in zip(probs, test_set):
        prob = np.asarray(prob)
        if prob.shape != img.shape:
            raise ShapeError("probability field does not match its image")
        gt_mask = disk_mask(annos, img.height, img.width, target)
        dices.append(metrics.dice(prob > 0.5, gt_mask))

        peaks = metrics.extract_peaks(prob, eval_cfg.score_threshold, eval_cfg.min_distance)
        t, p, n, _ = metrics.match_detections(peaks, annos.of_class(target), eval_cfg.radius)
        tp, fp, fn = tp + t, fp + p, fn + n
        f1s.append(metrics.prf1(t, p, n)[2])

        for c in sorted({a.class_id for a in annos}):
            gts = annos.of_class(c)
            ct = metrics.match_detections(peaks, gts, eval_cfg.radius)[0]
            class_tp[c] = class_tp.get(c, 0) + ct
            class_n[c] = class_n.get(c, 0) + len(gts)
        others = AnnotationSet(tuple(a for a in annos if a.class_id != target), annos.image_id)
        other_tp += metrics.match_detections(peaks, others, eval_cfg.radius)[0]
        other_n += len(others)

    precision, recall, f1 = metrics.prf1(tp, fp, fn)
    rec_other = other_tp / other_n if other_n else 0.0
    return metrics.MetricReport(
        dice=float(np.mean(dices)),
        precision=precision,
        recall=recall,
        f1=f1,
        recall_per_class={c: class_tp[c] / class_n[c] for c in class_n},
        exclusive_recall=metrics.exclusive_recall(recall, rec_other),
        tp=tp,
        fp=fp,
        fn=fn,
        f1_macro=float(np.mean(f1s)),
    )


def evaluate(params: ScorerParams, test_set, eval_cfg: EvalConfig | None = None) -> metrics.MetricReport:
    eval_cfg = eval_cfg or EvalConfig()
    if not test_set:
        raise EmptyDataset("test set is empty")
    return evaluate_probabilities([predict(params, img) for img, _ in test_set], test_set, eval_cfg)
