import csv
import statistics
import xml.etree.ElementTree as ET

import pytest

from sparseshot import bench
from sparseshot.bench import COLUMNS, LossEntry, RunConfig, load_config, plot, run_grid, save_config, series
from sparseshot.errors import FormatError, InvalidConfig, IoError
from sparseshot.losses import LossParams
from sparseshot.schedules import ScheduleSpec
from sparseshot.synth import SceneConfig
from sparseshot.trainer import TrainConfig

SVG = "{http://www.w3.org/2000/svg}"


def tiny_config(tmp_path, **kw):
    base = dict(
        scene=SceneConfig(height=32, width=32, n_cells_class1=4, min_separation=9.0),
        n_train_scenes=2,
        n_test_scenes=1,
        fractions=(0.5, 1.0),
        losses=(LossEntry(LossParams("ce")), LossEntry(LossParams("ece"), ScheduleSpec("linear", 0.75))),
        seeds=(0, 1),
        train=TrainConfig(epochs=2, hidden=4, kernel=3),
        output_dir=str(tmp_path / "out"),
    )
    base.update(kw)
    return RunConfig(**base)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in COLUMNS})


def score_section(path):
    return [{k: v for k, v in r.items() if k != "wall_seconds"} for r in read_rows(path)]


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        save_config(tmp_path / "c.json", cfg)
        assert load_config(tmp_path / "c.json") == cfg

    def test_default_grid_is_the_reference_benchmark(self):
        cfg = RunConfig()
        assert cfg.fractions == (0.1, 0.2, 0.3, 0.4, 1.0)
        assert [e.name for e in cfg.losses] == ["ce", "ece"]
        assert cfg.losses[1].schedule == ScheduleSpec("sigmoid", 0.75)
        assert len(cfg.seeds) == 5 and (cfg.n_train_scenes, cfg.n_test_scenes) == (8, 4)
        assert cfg.scene.n_cells_class1 == 20 and cfg.scene.height == cfg.scene.width == 128
        assert cfg.match_radius == cfg.scene.radius_range[1]

    @pytest.mark.parametrize(
        "kw",
        [dict(fractions=(0.5, 0.2)), dict(fractions=(0.0, 0.5)), dict(seeds=()), dict(losses=())],
    )
    def test_invalid(self, tmp_path, kw):
        with pytest.raises(InvalidConfig):
            tiny_config(tmp_path, **kw)

    def test_unknown_key(self):
        with pytest.raises(InvalidConfig):
            RunConfig.from_dict({"epochz": 3})


class TestRunGrid:
    def test_single_cell(self, tmp_path):
        cfg = tiny_config(tmp_path, fractions=(1.0,), losses=(LossEntry(),), seeds=(3,))
        path = run_grid(cfg)
        lines = path.read_text().splitlines()
        assert len(lines) == 2 and lines[0] == ",".join(COLUMNS)
        (row,) = read_rows(path)
        assert row["error"] == "" and 0.0 <= float(row["dice"]) <= 1.0
        assert float(row["match_radius"]) == cfg.scene.radius_range[1]

    def test_cardinality_order_and_reproducibility(self, tmp_path):
        cfg = tiny_config(tmp_path)
        first = run_grid(cfg)
        rows = read_rows(first)
        assert len(rows) == 2 * 2 * 2
        keys = [(float(r["fraction"]), r["loss_name"], int(r["seed"])) for r in rows]
        assert keys == [(f, l, s) for f in (0.5, 1.0) for l in ("ce", "ece") for s in (0, 1)]
        for r in rows:
            assert all(0.0 <= float(r[c]) <= 1.0 for c in bench.SCORE_COLUMNS)
            assert float(r["wall_seconds"]) >= 0
        before = score_section(first)
        second = run_grid(cfg, output_dir=tmp_path / "again")
        assert score_section(second) == before

    def test_worker_pool_matches_serial(self, tmp_path):
        cfg = tiny_config(tmp_path, fractions=(1.0,), seeds=(0,))
        serial = score_section(run_grid(cfg, output_dir=tmp_path / "a"))
        pooled = score_section(run_grid(cfg, workers=2, output_dir=tmp_path / "b"))
        assert serial == pooled

    def test_divergence_becomes_error_row(self, tmp_path):
        cfg = tiny_config(
            tmp_path, fractions=(1.0,), seeds=(0,), train=TrainConfig(epochs=3, hidden=4, kernel=3, learning_rate=1e300)
        )
        rows = read_rows(run_grid(cfg))
        assert len(rows) == 2
        for r in rows:
            assert r["error"].startswith("diverged") and r["dice"] == ""

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoError):
            run_grid(tiny_config(tmp_path, output_dir=str(blocker / "sub")))

    def test_sparse_cells_nest_per_image(self, tmp_path):
        cfg = tiny_config(tmp_path)
        small, _ = bench.cell_datasets(cfg, 0.5, 0)
        full, _ = bench.cell_datasets(cfg, 1.0, 0)
        for (_, a), (_, b) in zip(small, full):
            assert (b.labels[a.labels == 1] == 1).all()


class TestPlot:
    def rows(self, values):
        out = []
        for loss, by_frac in values.items():
            for f, scores in by_frac.items():
                for s, v in enumerate(scores):
                    out.append(dict(fraction=f, loss_name=loss, schedule_name="sigmoid", seed=s, dice=v, error=""))
        return out

    def polylines(self, svg_path):
        root = ET.parse(svg_path).getroot()
        assert root.tag == f"{SVG}svg"
        result = {}
        for g in root.iter(f"{SVG}g"):
            pts = g.find(f"{SVG}polyline").get("points").split()
            circles = g.findall(f"{SVG}circle")
            result[g.get("data-loss")] = ([tuple(map(float, p.split(","))) for p in pts], circles)
        return result

    def test_vertex_count(self, tmp_path):
        write_rows(tmp_path / "r.csv", self.rows({"ce": {0.1: [0.2], 0.5: [0.4], 1.0: [0.9]}}))
        plot(tmp_path / "r.csv", tmp_path / "f.svg")
        lines = self.polylines(tmp_path / "f.svg")
        assert list(lines) == ["ce"] and len(lines["ce"][0]) == 3

    def test_constant_scores_horizontal(self, tmp_path):
        write_rows(tmp_path / "r.csv", self.rows({"ece": {0.1: [0.7, 0.7], 0.4: [0.7], 1.0: [0.7, 0.7, 0.7]}}))
        plot(tmp_path / "r.csv", tmp_path / "f.svg")
        pts, _ = self.polylines(tmp_path / "f.svg")["ece"]
        assert len({y for _, y in pts}) == 1
        xs = [x for x, _ in pts]
        assert xs == sorted(xs)

    def test_medians_match_independent_recomputation(self, tmp_path):
        values = {
            "ce": {0.1: [0.1, 0.5, 0.2], 0.3: [0.4, 0.35], 1.0: [0.9, 0.8, 0.95, 0.7]},
            "ece": {0.1: [0.3, 0.6, 0.5], 0.3: [0.8], 1.0: [0.92, 0.91, 0.9]},
        }
        write_rows(tmp_path / "r.csv", self.rows(values))
        plot(tmp_path / "r.csv", tmp_path / "f.svg")
        lines = self.polylines(tmp_path / "f.svg")
        for loss, by_frac in values.items():
            _, circles = lines[loss]
            got = {float(c.get("data-fraction")): float(c.get("data-median")) for c in circles}
            assert got == {f: statistics.median(v) for f, v in by_frac.items()}
            for c in circles:
                v = by_frac[float(c.get("data-fraction"))]
                assert float(c.get("data-min")) == min(v) and float(c.get("data-max")) == max(v)

    def test_error_rows_skipped(self, tmp_path):
        rows = self.rows({"ce": {0.5: [0.5], 1.0: [0.9]}})
        rows.append(dict(fraction=1.0, loss_name="ce", schedule_name="sigmoid", seed=9, dice="", error="diverged"))
        write_rows(tmp_path / "r.csv", rows)
        assert series(tmp_path / "r.csv")["ce"] == [(0.5, 0.5, 0.5, 0.5), (1.0, 0.9, 0.9, 0.9)]

    def test_missing_columns(self, tmp_path):
        (tmp_path / "r.csv").write_text("fraction,loss_name\n0.1,ce\n")
        with pytest.raises(FormatError):
            plot(tmp_path / "r.csv", tmp_path / "f.svg")
