"""Command-line entry point: ``sparseshot <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import bench, data, gradcheck
from .errors import EmptyDataset, IoError, SparseShotError
from .losses import LossParams, Variant
from .model import load_checkpoint, save_checkpoint
from .schedules import Kind, ScheduleSpec
from .synth import SceneConfig, generate_scenes
from .trainer import EvalConfig, TrainConfig, evaluate, train

log = logging.getLogger("sparseshot")


def _fractions(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from None


def _paired_files(images_dir, annos_dir):
    """(image path, annotation path) pairs matched on file stem."""
    images = sorted(Path(images_dir).glob("*.pgm"))
    if not images:
        raise EmptyDataset(f"no .pgm images in {images_dir}")
    pairs = []
    for img in images:
        ann = Path(annos_dir) / f"{img.stem}.csv"
        if not ann.exists():
            raise IoError(f"no annotations for {img.name} (expected {ann})")
        pairs.append((img, ann))
    return pairs


def cmd_synth(args) -> int:
    cfg = SceneConfig()
    if args.config:
        cfg = SceneConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for img, annos in generate_scenes(cfg, args.n, args.seed):
        data.save_image(out / f"{annos.image_id}.pgm", img)
        data.save_annotations(out / f"{annos.image_id}.csv", annos)
    print(f"wrote {args.n} scenes to {out}")
    return 0


def cmd_sparsify(args) -> int:
    full = data.load_annotations(args.inp)
    plan = data.make_plan(len(full), args.fractions, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.inp).stem
    for f, variant in zip(plan.fractions, data.sparsify(full, plan)):
        path = out / f"{stem}_{f:g}.csv"
        data.save_annotations(path, variant)
        print(f"{path}: {len(variant)} of {len(full)} annotations")
    return 0


def cmd_train(args) -> int:
    dataset = []
    for img_path, ann_path in _paired_files(args.images, args.annos):
        img = data.load_image(img_path)
        annos = data.load_annotations(ann_path)
        dataset.append((img, data.rasterize(annos, img.height, img.width)))
    cfg = TrainConfig(
        epochs=args.epochs,
        loss=LossParams(args.loss),
        schedule=ScheduleSpec(args.schedule, args.rho_max),
        learning_rate=args.lr,
        momentum=args.momentum,
        seed=args.seed,
    )
    params, history = train(dataset, cfg)
    save_checkpoint(args.out, params)
    if args.history:
        history.write_csv(args.history)
    print(f"trained {len(history)} steps, final loss {history.records[-1].loss:.6g}; checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    test_set = [
        (data.load_image(i), data.load_annotations(a)) for i, a in _paired_files(args.images, args.annos)
    ]
    rep = evaluate(params, test_set, EvalConfig(args.score_threshold, args.min_distance, args.radius))
    cols = ["dice", "f1", "f1_macro", "precision", "recall", "exclusive_recall", "tp", "fp", "fn"]
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        w.writerow([repr(getattr(rep, c)) for c in cols])
    print(f"dice={rep.dice:.4f} f1={rep.f1:.4f} (tp={rep.tp} fp={rep.fp} fn={rep.fn})")
    return 0


def cmd_bench(args) -> int:
    cfg = bench.load_config(args.config)
    path = bench.run_grid(cfg, workers=args.workers, output_dir=args.out)
    print(f"results written to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.trials, args.seed)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<18} trials={r.trials:<4} max_abs_err={r.max_abs_err:.3e} failures={r.failures} {status}")
    return 0 if all(r.ok for r in results) else 1


def cmd_plot(args) -> int:
    bench.plot(args.inp, args.out, args.metric)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseshot", description="Sparse-annotation localisation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--config", help="SceneConfig JSON (defaults if omitted)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sparsify", help="write nested sparse variants of an annotation CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--fractions", type=_fractions, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("train", help="train a scorer on images with (sparse) annotations")
    p.add_argument("--images", required=True)
    p.add_argument("--annos", required=True)
    p.add_argument("--loss", choices=[v.value for v in Variant], default="ece")
    p.add_argument("--schedule", choices=[k.value for k in Kind], default="sigmoid")
    p.add_argument("--rho-max", type=float, default=0.75)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", help="optional per-step CSV log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on exhaustively annotated images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--annos", required=True)
    p.add_argument("--radius", type=float, default=EvalConfig.radius)
    p.add_argument("--min-distance", type=float, default=EvalConfig.min_distance)
    p.add_argument("--score-threshold", type=float, default=EvalConfig.score_threshold)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a fraction x loss x seed grid")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss and the model")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="fraction-vs-score SVG from a results CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=["dice", "f1", "exclusive_recall"], default="dice")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SparseShotError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
