"""Experiment grids over annotation fraction x loss x seed, plus an SVG plot."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from xml.sax.saxutils import escape

from .data import make_plan, rasterize, sparsify
from .errors import Diverged, FormatError, InvalidConfig, IoError
from .losses import LossParams
from .schedules import ScheduleSpec
from .seeding import derive_seed
from .synth import SceneConfig, generate_scenes
from .trainer import EvalConfig, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

SCORE_COLUMNS = ["dice", "f1", "f1_macro", "precision", "recall", "exclusive_recall"]
COLUMNS = ["fraction", "loss_name", "schedule_name", "seed", *SCORE_COLUMNS, "match_radius", "wall_seconds", "error"]
RESULTS_NAME = "results.csv"


@dataclass(frozen=True)
class LossEntry:
    loss: LossParams = field(default_factory=LossParams)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)

    @property
    def name(self) -> str:
        return self.loss.variant.value

    @property
    def schedule_name(self) -> str:
        return self.schedule.kind.value

    @classmethod
    def from_dict(cls, d: dict) -> "LossEntry":
        d = dict(d)
        sched = d.pop("schedule", {})
        try:
            return cls(LossParams(**d), ScheduleSpec(**sched))
        except TypeError as exc:
            raise InvalidConfig(f"bad loss entry {d}: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self.loss)
        d["variant"] = self.loss.variant.value
        sched = asdict(self.schedule)
        sched["kind"] = self.schedule.kind.value
        del sched["total_steps"]  # set by the trainer
        d["schedule"] = sched
        return d


@dataclass(frozen=True)
class BenchEval:
    score_threshold: float = 0.5
    min_distance: float = 7.0
    # None means the upper end of the scene radius range
    radius: float | None = None


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    n_train_scenes: int = 8
    n_test_scenes: int = 4
    fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 1.0)
    losses: tuple[LossEntry, ...] = (
        LossEntry(LossParams("ce")),
        LossEntry(LossParams("ece"), ScheduleSpec("sigmoid", 0.75)),
    )
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: BenchEval = field(default_factory=BenchEval)
    output_dir: str = "bench_out"

    def __post_init__(self):
        if self.n_train_scenes < 1 or self.n_test_scenes < 1:
            raise InvalidConfig("scene counts must be positive")
        if not self.fractions or not self.losses or not self.seeds:
            raise InvalidConfig("fractions, losses and seeds must be nonempty")
        if any(not (0.0 < f <= 1.0) for f in self.fractions):
            raise InvalidConfig("fractions must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.fractions, self.fractions[1:])):
            raise InvalidConfig("fractions must be strictly increasing")
        if any(s < 0 for s in self.seeds):
            raise InvalidConfig("seeds must be non-negative")

    @property
    def match_radius(self) -> float:
        return self.eval.radius if self.eval.radius is not None else float(self.scene.radius_range[1])

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown run config keys: {sorted(unknown)}")
        kw = dict(d)
        if "scene" in kw:
            kw["scene"] = SceneConfig.from_dict(kw["scene"])
        if "losses" in kw:
            kw["losses"] = tuple(LossEntry.from_dict(e) for e in kw["losses"])
        if "train" in kw:
            t = dict(kw["train"])
            t.pop("loss", None)
            t.pop("schedule", None)
            try:
                kw["train"] = TrainConfig(**t)
            except TypeError as exc:
                raise InvalidConfig(f"bad train section: {exc}") from None
        if "eval" in kw:
            try:
                kw["eval"] = BenchEval(**kw["eval"])
            except TypeError as exc:
                raise InvalidConfig(f"bad eval section: {exc}") from None
        for key in ("fractions", "seeds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        del t["loss"], t["schedule"]
        return {
            "scene": self.scene.to_dict(),
            "n_train_scenes": self.n_train_scenes,
            "n_test_scenes": self.n_test_scenes,
            "fractions": list(self.fractions),
            "losses": [e.to_dict() for e in self.losses],
            "seeds": list(self.seeds),
            "train": t,
            "eval": asdict(self.eval),
            "output_dir": str(self.output_dir),
        }


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")


def cell_datasets(cfg: RunConfig, fraction: float, seed: int):
    """Training pairs and exhaustive test scenes for one grid cell.

    Scenes depend only on (scene seed, run seed), so every fraction and loss
    with the same run seed sees the same images; each training image gets its
    own sparsification permutation, which keeps fractions nested per image.
    """
    base = cfg.scene.seed
    train_scenes = generate_scenes(cfg.scene, cfg.n_train_scenes, derive_seed(base, seed, 0))
    test_scenes = generate_scenes(cfg.scene, cfg.n_test_scenes, derive_seed(base, seed, 1))
    dataset = []
    for i, (img, annos) in enumerate(train_scenes):
        (variant,) = sparsify(annos, make_plan(len(annos), [fraction], derive_seed(seed, i)))
        dataset.append((img, rasterize(variant, img.height, img.width)))
    return dataset, test_scenes


def run_cell(cfg: RunConfig, fraction: float, entry: LossEntry, seed: int) -> dict:
    start = time.perf_counter()
    row = {
        "fraction": fraction,
        "loss_name": entry.name,
        "schedule_name": entry.schedule_name,
        "seed": seed,
        "match_radius": cfg.match_radius,
        "error": "",
    }
    dataset, test_scenes = cell_datasets(cfg, fraction, seed)
    tcfg = replace(cfg.train, loss=entry.loss, schedule=entry.schedule, seed=seed)
    try:
        params, _ = train(dataset, tcfg)
    except Diverged as exc:
        row.update({k: None for k in SCORE_COLUMNS}, error=f"diverged at step {exc.step}")
    else:
        ecfg = EvalConfig(cfg.eval.score_threshold, cfg.eval.min_distance, cfg.match_radius)
        rep = evaluate(params, test_scenes, ecfg)
        row.update(
            dice=rep.dice,
            f1=rep.f1,
            f1_macro=rep.f1_macro,
            precision=rep.precision,
            recall=rep.recall,
            exclusive_recall=rep.exclusive_recall,
        )
    row["wall_seconds"] = time.perf_counter() - start
    return row


def _cell_task(args):
    cfg, fraction, li, seed = args
    return li, run_cell(cfg, fraction, cfg.losses[li], seed)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(path, rows) -> None:
    try:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in COLUMNS])
    except OSError as exc:
        raise IoError(f"cannot write results to {path}: {exc}") from exc


def run_grid(cfg: RunConfig, workers: int = 1, output_dir=None) -> Path:
    """Run every (fraction, loss, seed) cell and write ``results.csv``.

    Returns the path of the results file. Rows are sorted by fraction, then
    loss position in the config, then seed, whatever order cells finish in.
    """
    out_dir = Path(output_dir if output_dir is not None else cfg.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(out_dir / "run_config.json", cfg)
    except OSError as exc:
        raise IoError(f"output directory {out_dir} is not writable: {exc}") from exc

    tasks = [(cfg, f, li, s) for f in cfg.fractions for li in range(len(cfg.losses)) for s in cfg.seeds]
    if workers <= 1:
        done = []
        for t in tasks:
            done.append(_cell_task(t))
            log.info("cell fraction=%s loss=%s seed=%s done", t[1], cfg.losses[t[2]].name, t[3])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_cell_task, tasks))
    done.sort(key=lambda item: (item[1]["fraction"], item[0], item[1]["seed"]))
    path = out_dir / RESULTS_NAME
    write_results(path, [row for _, row in done])
    return path


def read_results(path) -> tuple[list[str], list[dict]]:
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return header, rows


def series(path, metric: str = "dice") -> dict[str, list[tuple[float, float, float, float]]]:
    """Per loss label: sorted (fraction, median, min, max) over seeds.

    Error rows are skipped. Labels are the loss name, with the schedule
    appended when one loss name occurs with several schedules.
    """
    header, rows = read_results(path)
    needed = {"fraction", "loss_name", "schedule_name", metric}
    missing = needed - set(header)
    if missing:
        raise FormatError(f"results file lacks columns {sorted(missing)}")
    schedules: dict[str, set] = {}
    for r in rows:
        schedules.setdefault(r["loss_name"], set()).add(r["schedule_name"])
    groups: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        if r[metric] == "":
            continue
        label = r["loss_name"]
        if len(schedules[label]) > 1:
            label = f"{label}/{r['schedule_name']}"
        groups.setdefault(label, {}).setdefault(float(r["fraction"]), []).append(float(r[metric]))
    return {
        label: [(f, statistics.median(v), min(v), max(v)) for f, v in sorted(by_frac.items())]
        for label, by_frac in groups.items()
    }


PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def plot(results_csv, out_svg, metric: str = "dice") -> None:
    """Fraction-vs-score chart: median polyline per loss, min/max whiskers."""
    data = series(results_csv, metric)
    w, h, margin = 640, 420, 60
    x0, x1, y0, y1 = margin, w - 20, h - margin, 20

    def sx(pct):
        return x0 + (x1 - x0) * pct / 100.0

    def sy(v):
        return y0 - (y0 - y1) * v

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]
    for t in range(0, 101, 20):
        out.append(f'<text x="{sx(t):.2f}" y="{y0 + 18}" font-size="11" text-anchor="middle">{t}</text>')
        out.append(f'<text x="{x0 - 8}" y="{sy(t / 100):.2f}" font-size="11" text-anchor="end">{t / 100:.1f}</text>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{h - 15}" font-size="12" text-anchor="middle">annotations (%)</text>')
    out.append(
        f'<text x="15" y="{(y0 + y1) / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 15 {(y0 + y1) / 2})">{escape(metric)}</text>'
    )
    for i, (label, pts) in enumerate(sorted(data.items())):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(f * 100):.4f},{sy(med):.4f}" for f, med, _, _ in pts)
        out.append(f'<g class="series" data-loss="{escape(label)}">')
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for f, med, lo, hi in pts:
            x = sx(f * 100)
            out.append(f'<line x1="{x:.4f}" y1="{sy(lo):.4f}" x2="{x:.4f}" y2="{sy(hi):.4f}" stroke="{color}"/>')
            out.append(
                f'<circle cx="{x:.4f}" cy="{sy(med):.4f}" r="3" fill="{color}" '
                f'data-fraction="{f!r}" data-median="{med!r}" data-min="{lo!r}" data-max="{hi!r}"/>'
            )
        out.append("</g>")
        out.append(
            f'<text x="{x1 - 100}" y="{y1 + 16 * (i + 1)}" font-size="12" fill="{color}">{escape(label)}</text>'
        )
    out.append("</svg>")
    try:
        Path(out_svg).write_text("\n".join(out) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {out_svg}: {exc}") from exc


def check_trend(results_csv, sparse=(0.1, 0.2), margin=0.05, near=0.4, ratio=0.95, ce="ce", ece="ece") -> dict:
    """Summarise the sparse-fraction trend of a results file.

    Returns median DICE per (loss, fraction) plus the two booleans:
    ``gain`` (ECE beats CE by ``margin`` at every sparse fraction) and
    ``plateau`` (ECE at ``near`` reaches ``ratio`` of ECE at 1.0).
    """
    data = series(results_csv, "dice")
    med = {label: {f: m for f, m, _, _ in pts} for label, pts in data.items()}
    gain = all(med[ece][f] - med[ce][f] >= margin for f in sparse)
    plateau = med[ece][near] >= ratio * med[ece][1.0]
    return {"medians": med, "gain": gain, "plateau": plateau}
