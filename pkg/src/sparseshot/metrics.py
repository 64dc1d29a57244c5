"""DICE, peak extraction, greedy point matching and exclusive recall."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AnnotationSet
from .errors import RangeError, ShapeError


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    score: float
    class_id: int = 1

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise RangeError(f"detection score {self.score} outside [0, 1]")


@dataclass
class MetricReport:
    dice: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    recall_per_class: dict = field(default_factory=dict)
    exclusive_recall: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    # per-image mean F1, next to the pooled-count f1 above
    f1_macro: float = 0.0


def dice(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask) != 0
    b = np.asarray(gt_mask) != 0
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / denom


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def local_maxima(prob: np.ndarray) -> np.ndarray:
    """Pixels not exceeded by any of their 8 neighbours (plateaus included)."""
    padded = np.pad(prob, 1, constant_values=-np.inf)
    h, w = prob.shape
    is_max = np.ones(prob.shape, dtype=bool)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            if dr == 1 and dc == 1:
                continue
            is_max &= prob >= padded[dr : dr + h, dc : dc + w]
    return is_max


def extract_peaks(prob, score_threshold: float = 0.5, min_distance: float = 5.0) -> list[Detection]:
    """Greedy non-maximum suppression over local maxima of a probability field.

    Candidates are visited by descending score, ties broken by (row, col);
    a candidate survives if it is at least ``min_distance`` from every
    previously accepted peak.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise ShapeError("probability field must be 2-D")
    if not (0.0 <= score_threshold <= 1.0):
        raise RangeError("score_threshold must lie in [0, 1]")
    if not min_distance > 0:
        raise RangeError("min_distance must be positive")

    rows, cols = np.nonzero(local_maxima(prob) & (prob >= score_threshold))
    scores = prob[rows, cols]
    # lexsort: last key is primary
    order = np.lexsort((cols, rows, -scores))
    kept_r, kept_c = [], []
    d2 = min_distance * min_distance
    out = []
    for i in order:
        r, c = rows[i], cols[i]
        if kept_r:
            dr = np.asarray(kept_r) - r
            dc = np.asarray(kept_c) - c
            if np.any(dr * dr + dc * dc < d2):
                continue
        kept_r.append(r)
        kept_c.append(c)
        out.append(Detection(float(c), float(r), float(scores[i])))
    return out


def match_detections(preds, gts: AnnotationSet, radius: float):
    """Greedy one-to-one matching of detections to annotations.

    Pairs within ``radius`` are accepted in order of increasing distance
    (ties: prediction index, then annotation index) when both ends are still
    free. Returns (tp, fp, fn, matching) with matching a list of
    (pred_index, gt_index).
    """
    if not radius > 0:
        raise RangeError("match radius must be positive")
    preds = list(preds)
    gts = list(gts)
    if not preds or not gts:
        return 0, len(preds), len(gts), []
    p = np.array([(d.cx, d.cy) for d in preds], dtype=np.float64)
    g = np.array([(a.cx, a.cy) for a in gts], dtype=np.float64)
    dist = np.hypot(p[:, None, 0] - g[None, :, 0], p[:, None, 1] - g[None, :, 1])
    pi, gi = np.nonzero(dist <= radius)
    order = np.lexsort((gi, pi, dist[pi, gi]))

    used_p = np.zeros(len(preds), dtype=bool)
    used_g = np.zeros(len(gts), dtype=bool)
    matching = []
    for j in order:
        a, b = pi[j], gi[j]
        if not used_p[a] and not used_g[b]:
            used_p[a] = used_g[b] = True
            matching.append((int(a), int(b)))
    tp = len(matching)
    return tp, len(preds) - tp, len(gts) - tp, matching


def exclusive_recall(rec_target: float, rec_other: float) -> float:
    """Target-class recall discounted by recall on non-target objects."""
    for name, v in (("rec_target", rec_target), ("rec_other", rec_other)):
        if not (0.0 <= v <= 1.0):
            raise RangeError(f"{name}={v} outside [0, 1]")
    return rec_target * (1.0 - rec_other)
