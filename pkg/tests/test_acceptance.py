"""Acceptance suite: one test per criterion, each summarised as PASS/FAIL."""

import itertools
import math
import time

import numpy as np
import pytest

from sparseshot.bench import RunConfig, check_trend, run_grid
from sparseshot.data import Annotation, AnnotationSet, make_plan, rasterize, sparsify
from sparseshot.gradcheck import check_loss_gradients, random_label_field
from sparseshot.losses import LossParams, Variant, batch_loss, exclusion_mask, second_order_proxy, sigmoid
from sparseshot.metrics import Detection, dice, exclusive_recall, match_detections
from sparseshot.schedules import Kind, ScheduleSpec, threshold_at
from sparseshot.synth import SceneConfig, generate_scenes
from sparseshot.trainer import TrainConfig, WeakSupConfig, train, weak_supervision_train


def detail(record_property, text):
    record_property("detail", text)


@pytest.mark.criterion(1, "gradient suite")
def test_gradient_suite(record_property):
    start = time.perf_counter()
    results = check_loss_gradients(trials=100, seed=2024)
    elapsed = time.perf_counter() - start
    worst = max(r.max_abs_err for r in results)
    detail(record_property, f"5 variants x 100 draws, worst abs err {worst:.2e}, {elapsed:.1f}s")
    assert [r.name for r in results] == [f"loss/{v.value}" for v in Variant]
    assert all(r.trials == 100 and r.ok for r in results), results
    assert elapsed < 30.0


@pytest.mark.criterion(2, "reduction identities")
def test_reduction_identities(record_property):
    rng = np.random.default_rng(5)
    ce = LossParams(Variant.CE)
    pairs = [
        (LossParams(Variant.ECE), 1.0),
        (LossParams(Variant.FOCAL, alpha=1.0, gamma=0.0), rng.uniform()),
        (LossParams(Variant.FOCAL_ECE, alpha=1.0, gamma=0.0), 1.0),
    ]
    for _ in range(50):
        shape = tuple(rng.integers(1, 20, 2))
        z = rng.normal(0, 4, shape)
        labels = random_label_field(rng, shape, fg_rate=rng.uniform())
        ref = batch_loss(z, labels, ce)
        for params, theta in pairs:
            out = batch_loss(z, labels, params, theta)
            assert out.total == ref.total
            assert np.array_equal(out.grad_logits, ref.grad_logits)
            assert out.included_count == ref.included_count
    detail(record_property, "50 fields x 3 identities, bitwise")


@pytest.mark.criterion(3, "exclusion monotonicity")
def test_exclusion_monotonicity(record_property):
    rng = np.random.default_rng(6)
    for i in range(1000):
        shape = tuple(rng.integers(1, 12, 2))
        z = rng.normal(0, 3, shape)
        labels = random_label_field(rng, shape)
        t1, t2 = np.sort(rng.uniform(0, 1, 2))
        symmetric = bool(i % 2)
        prob = sigmoid(z)
        inc1 = exclusion_mask(prob, labels.membership, t1, symmetric)
        inc2 = exclusion_mask(prob, labels.membership, t2, symmetric)
        assert np.all(inc2[inc1])
        variant = Variant.ECE if i % 4 < 2 else Variant.FOCAL_ECE
        out = batch_loss(z, labels, LossParams(variant, symmetric_exclusion=symmetric), t1)
        assert np.all(out.grad_logits[~inc1] == 0.0)
        assert out.excluded_count == int((~inc1).sum())
    detail(record_property, "1000 pairs, both exclusion modes")


@pytest.mark.criterion(4, "sparsifier nesting")
def test_sparsifier_nesting(record_property):
    rng = np.random.default_rng(7)
    for i in range(200):
        n = int(rng.integers(1, 60))
        full = AnnotationSet(tuple(Annotation(float(k), float(rng.uniform(0, 50)), 2.0) for k in range(n)))
        ladder = sorted(set(np.round(rng.uniform(0.01, 1.0, rng.integers(1, 10)), 3).tolist()))
        variants = sparsify(full, make_plan(n, ladder, seed=i))
        sets = [set(v) for v in variants]
        assert all(s <= set(full) for s in sets)
        for small, large in itertools.combinations(sets, 2):
            assert small <= large
    detail(record_property, "200 sets with random ladders")


@pytest.mark.criterion(5, "schedule contracts")
def test_schedule_contracts(record_property):
    for rho in (0.25, 0.5, 0.75, 1.0):
        for total in (1, 7, 100, 2400):
            steps = range(total + 1)
            fixed = {threshold_at(ScheduleSpec(Kind.FIXED, rho, total_steps=total), s) for s in steps}
            assert fixed == {rho}
            for kind in (Kind.LINEAR, Kind.SIGMOID, Kind.LITERAL_SIGMOID):
                spec = ScheduleSpec(kind, rho, total_steps=total)
                values = [threshold_at(spec, s) for s in steps]
                assert all(b >= a for a, b in zip(values, values[1:]))
                assert all(0.0 <= v <= 1.0 for v in values)
            sig = ScheduleSpec(Kind.SIGMOID, rho, steepness=12.0, total_steps=total)
            assert threshold_at(sig, 0) < 0.01 * rho
            assert threshold_at(sig, total) > 0.99 * rho
    detail(record_property, "4 rho x 4 horizons")


def naive_dice(a, b):
    a_set = {i for i, v in enumerate(a.ravel()) if v}
    b_set = {i for i, v in enumerate(b.ravel()) if v}
    if not a_set and not b_set:
        return 1.0
    return 2 * len(a_set & b_set) / (len(a_set) + len(b_set))


def optimal_tp(preds, gts, radius):
    hit = [[math.hypot(p.cx - g.cx, p.cy - g.cy) <= radius for g in gts] for p in preds]
    best = 0
    for k in range(min(len(preds), len(gts)), 0, -1):
        for ps in itertools.combinations(range(len(preds)), k):
            for gs in itertools.permutations(range(len(gts)), k):
                if all(hit[p][g] for p, g in zip(ps, gs)):
                    return k
    return best


@pytest.mark.criterion(6, "metric oracles")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(8)
    for _ in range(500):
        shape = tuple(rng.integers(1, 16, 2))
        a = rng.random(shape) < rng.uniform()
        b = rng.random(shape) < rng.uniform()
        assert dice(a, b) == naive_dice(a, b)

    for _ in range(200):
        radius = float(rng.uniform(0.5, 4.0))
        gts = []
        target = int(rng.integers(1, 7))
        while len(gts) < target:
            p = rng.uniform(0, 40, 2)
            if all(math.hypot(*(p - q)) > 2 * radius for q in gts):
                gts.append(p)
        preds = []
        for _ in range(int(rng.integers(0, 7))):
            anchor = gts[rng.integers(len(gts))] if rng.random() < 0.7 else rng.uniform(0, 40, 2)
            preds.append(anchor + rng.normal(0, radius * 0.6, 2))
        dets = [Detection(float(x), float(y), 0.9) for x, y in preds]
        annos = AnnotationSet(tuple(Annotation(float(x), float(y), 1.0) for x, y in gts))
        tp, fp, fn, _ = match_detections(dets, annos, radius)
        assert tp == optimal_tp(dets, list(annos), radius)
        assert tp + fp == len(dets) and tp + fn == len(annos)

    assert exclusive_recall(1.0, 1.0) == 0.0
    assert exclusive_recall(1.0, 0.0) == 1.0
    detail(record_property, "500 DICE pairs, 200 matchings, endpoints")


@pytest.mark.criterion(7, "second-order proxy")
def test_second_order_proxy(record_property):
    grid = np.arange(0, 10001) * 1e-4
    worst = 0.0
    for m, n in itertools.product((1, 2, 3), repeat=2):
        assert second_order_proxy(0.0, m, n) == 0.0
        assert second_order_proxy(1.0, m, n) == 0.0
        values = [second_order_proxy(float(p), m, n) for p in grid]
        argmax = float(grid[int(np.argmax(values))])
        worst = max(worst, abs(argmax - m / (m + n)))
    detail(record_property, f"max |argmax - m/(m+n)| = {worst:.1e}")
    assert worst <= 1e-3


@pytest.mark.criterion(8, "weak-supervision loop")
def test_weak_supervision(record_property):
    scene = SceneConfig(height=48, width=48, n_cells_class1=6, min_separation=10.0)
    dataset = []
    for i, (img, annos) in enumerate(generate_scenes(scene, 3, seed=11)):
        (v,) = sparsify(annos, make_plan(len(annos), [0.3], i))
        dataset.append((img, rasterize(v, img.height, img.width)))
    base = TrainConfig(epochs=6, seed=3)

    p_ws, h_ws = weak_supervision_train(dataset, WeakSupConfig(rounds=1, tau=0.75, base=base))
    p_ce, h_ce = train(dataset, base)
    assert p_ws == p_ce and h_ws.records == h_ce.records

    promoted = {}
    for tau in (0.75, 0.5):
        _, hist = weak_supervision_train(dataset, WeakSupConfig(rounds=3, tau=tau, base=base))
        rounds = hist.label_rounds
        assert len(rounds) == 3
        for prev, nxt in zip(rounds, rounds[1:]):
            for a, b in zip(prev, nxt):
                assert np.all(b.foreground[a.foreground]) and np.all(b.labels[a.labels == 1] == 1)
        for (_, orig), last in zip(dataset, rounds[-1]):
            assert np.all(last.labels[orig.labels == 1] == 1)
            assert np.all(last.foreground[orig.foreground])
        promoted[tau] = sum(int(l.foreground.sum() - o.foreground.sum()) for (_, o), l in zip(dataset, rounds[-1]))
    detail(record_property, "rounds=1 bit-identical; promoted pixels " + ", ".join(
        f"tau={t}: {c}" for t, c in promoted.items()))


@pytest.fixture(scope="module")
def default_grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    start = time.perf_counter()
    path = run_grid(RunConfig(), output_dir=out / "first")
    return path, time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.criterion(9, "synthetic trend reproduction")
def test_synthetic_trend(default_grid, record_property):
    path, seconds = default_grid
    summary = check_trend(path, sparse=(0.1, 0.2), margin=0.05, near=0.4, ratio=0.95)
    med = summary["medians"]
    gaps = {f: med["ece"][f] - med["ce"][f] for f in (0.1, 0.2)}
    ratio = med["ece"][0.4] / med["ece"][1.0]
    table = " ".join(f"{f:g}:{med['ce'][f]:.3f}/{med['ece'][f]:.3f}" for f in sorted(med["ce"]))
    detail(
        record_property,
        f"median DICE ce/ece {table}; gap@0.1={gaps[0.1]:+.3f} gap@0.2={gaps[0.2]:+.3f} "
        f"(need >= +0.05); ece@0.4/ece@1.0={ratio:.3f} (need >= 0.95); {seconds:.0f}s",
    )
    assert seconds <= 600
    assert summary["plateau"], f"ECE@0.4 / ECE@1.0 = {ratio:.3f}"
    assert gaps[0.2] >= 0.05, f"gap at 0.2 is {gaps[0.2]:+.3f}"
    assert gaps[0.1] >= 0.05, f"gap at 0.1 is {gaps[0.1]:+.3f}"


def score_section(path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    drop = header.index("wall_seconds")
    return [",".join(c for i, c in enumerate(line.split(",")) if i != drop) for line in lines]


@pytest.mark.slow
@pytest.mark.criterion(10, "end-to-end reproducibility")
def test_reproducibility(default_grid, record_property):
    first, _ = default_grid
    second = run_grid(RunConfig(), output_dir=first.parent.parent / "second")
    a, b = score_section(first), score_section(second)
    detail(record_property, f"{len(a) - 1} rows compared")
    assert a == b
