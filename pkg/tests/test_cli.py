import json
from pathlib import Path

import numpy as np

from prevmap import util
from prevmap.cli import main
from prevmap.geodata import Location, build_grid, read_asc, write_asc


def write_config(path: Path, cfg: dict) -> str:
    path.write_text(json.dumps(cfg, indent=1))
    return str(path)


def constant_raster(path: Path, value=0.3, span=2.0, cell=0.2):
    r = build_grid((Location(0, 0), Location(span, span)), cell)
    r.values[:, :] = value
    write_asc(r, path)
    return path


GP_FAST = {
    "cov": {"family": "exponential", "variance": 1.0, "range": 1.0, "metric": "euclidean"},
    "boosting": {"rounds": 4, "learning_rate": 0.2},
    "early_stop": True,
}


def run(args):
    return main([str(a) for a in args])


class TestSimulateFitPredictSmoke:
    def test_gp_on_constant_raster(self, tmp_path):
        """simulate -> fit -> predict on a constant-0.3 truth surface: the
        prediction raster sits within 0.05 of 0.3 on at least 95% of cells."""
        raster = constant_raster(tmp_path / "truth.asc")
        out = tmp_path / "run"
        sim_cfg = write_config(
            tmp_path / "sim.json",
            {"raster": str(raster), "locations": {"mode": "uniform", "count": 120},
             "tests_per_site": 85, "noise_sd": 0.0},
        )
        assert run(["simulate", "--config", sim_cfg, "--out", out, "--seed", 5]) == 0
        fit_cfg = write_config(
            tmp_path / "fit.json",
            {"model": "gp", "survey": str(out / "survey.csv"), "gp": GP_FAST},
        )
        assert run(["fit", "--config", fit_cfg, "--out", out, "--seed", 5]) == 0
        pred_cfg = write_config(
            tmp_path / "pred.json",
            {"model_file": str(out / "model.pkl"),
             "grid": {"bbox": [[0, 0], [2, 2]], "cell_size": 0.2}},
        )
        assert run(["predict", "--config", pred_cfg, "--out", out, "--seed", 5]) == 0
        mean = read_asc(out / "mean.asc")
        frac = np.mean(np.abs(mean.values - 0.3) < 0.05)
        assert frac >= 0.95
        sd = read_asc(out / "sd.asc")
        assert np.all(sd.values >= 0)

    def test_simulate_sidecar_reports_seed_and_noise(self, tmp_path):
        raster = constant_raster(tmp_path / "truth.asc")
        out = tmp_path / "run"
        cfg = write_config(
            tmp_path / "sim.json",
            {"raster": str(raster), "locations": {"mode": "uniform", "count": 10},
             "noise_sd": 0.4},
        )
        run(["simulate", "--config", cfg, "--out", out, "--seed", 9])
        side = json.loads((out / "survey_provenance.json").read_text())
        assert side["seed"] == 9
        assert side["noise_sd"] == 0.4
        assert side["raster"] == str(raster)


class TestCv:
    def test_k2_on_4_records_emits_4_rows(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        survey = tmp_path / "s.csv"
        survey.write_text(
            "lon,lat,examined,positive\n0,0,50,5\n0.1,0,50,10\n4,4,50,30\n4.1,4,50,35\n"
        )
        cfg = write_config(
            tmp_path / "cv.json",
            {"model": "constant", "survey": str(survey), "cv": {"k": 2}},
        )
        assert run(["cv", "--config", cfg, "--out", out, "--seed", 1]) == 0
        rows = (out / "records.csv").read_text().strip().split("\n")
        assert rows[0] == "record_id,fold,y,yhat,sd,within1,within2"
        assert len(rows) == 5
        blob = json.loads((out / "metrics.json").read_text())
        assert blob["n"] == 4 and blob["k"] == 2


class TestBench:
    def test_one_row_per_model_and_skip_cap(self, tmp_path):
        raster = constant_raster(tmp_path / "truth.asc", span=4.0, cell=0.5)
        out = tmp_path / "run"
        cfg = write_config(
            tmp_path / "bench.json",
            {
                "models": ["constant", "gp"],
                "sizes": [40, 80],
                "raster": str(raster),
                "gp_exact_cap": 50,
                "gp": GP_FAST,
            },
        )
        assert run(["bench", "--config", cfg, "--out", out, "--seed", 2]) == 0
        rows = json.loads((out / "bench.json").read_text())["runs"]
        assert len(rows) == 4
        by_key = {(r["model"], r["n_records"]): r for r in rows}
        assert "skipped" in by_key[("gp", 80)]
        assert by_key[("gp", 40)]["wall_time_s"] > 0
        assert by_key[("gp", 40)]["peak_rss_bytes"] > 0
        assert (
            by_key[("gp", 40)]["wall_time_s"]
            >= by_key[("gp", 40)]["fit_time_s"] + by_key[("gp", 40)]["predict_time_s"] - 0.05
        )

    def test_unsorted_sizes_rejected(self, tmp_path):
        raster = constant_raster(tmp_path / "truth.asc")
        cfg = write_config(
            tmp_path / "bench.json",
            {"models": ["constant"], "sizes": [100, 50], "raster": str(raster)},
        )
        assert run(["bench", "--config", cfg, "--out", tmp_path / "o"]) == 2


class TestDeterminism:
    def test_repeat_runs_bit_identical(self, tmp_path):
        """Identical config + seed, different --out: same bytes everywhere."""
        raster = constant_raster(tmp_path / "truth.asc")
        a, b = tmp_path / "a", tmp_path / "b"
        sim_cfg = write_config(
            tmp_path / "sim.json",
            {"raster": str(raster),
             "locations": {"mode": "uniform", "count": 60}, "noise_sd": 0.2},
        )
        for out in (a, b):
            run(["simulate", "--config", sim_cfg, "--out", out, "--seed", 33])
        fit_cfg = write_config(
            tmp_path / "fit.json",
            {"model": "sprf", "survey": str(a / "survey.csv"),
             "sprf": {"num_trees": 40, "metric": "euclidean"}},
        )
        for out in (a, b):
            run(["fit", "--config", fit_cfg, "--out", out, "--seed", 33])
        pred_cfg = write_config(
            tmp_path / "pred.json",
            {"model_file": str(a / "model.pkl"),
             "grid": {"bbox": [[0, 0], [2, 2]], "cell_size": 0.4}},
        )
        for out in (a, b):
            run(["predict", "--config", pred_cfg, "--out", out, "--seed", 33])
        for name in ("survey.csv", "model.pkl", "mean.asc", "sd.asc", "provenance.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


class TestValidation:
    def test_missing_config_file(self, tmp_path, capsys):
        assert run(["fit", "--config", tmp_path / "absent.json", "--out", tmp_path]) == 2
        assert "not found" in capsys.readouterr().err

    def test_missing_field_named(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"model": "gp"})
        assert run(["fit", "--config", cfg, "--out", tmp_path]) == 2
        assert "survey" in capsys.readouterr().err

    def test_unknown_model_named(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"model": "kriging", "survey": "x"})
        assert run(["fit", "--config", cfg, "--out", tmp_path]) == 2
        assert "kriging" in capsys.readouterr().err

    def test_bad_bbox_shape(self, tmp_path, capsys):
        survey = tmp_path / "s.csv"
        survey.write_text("lon,lat,examined,positive\n0,0,10,1\n1,1,10,2\n")
        out = tmp_path / "o"
        fit_cfg = write_config(
            tmp_path / "f.json", {"model": "constant", "survey": str(survey)}
        )
        run(["fit", "--config", fit_cfg, "--out", out])
        cfg = write_config(
            tmp_path / "p.json",
            {"model_file": str(out / "model.pkl"), "grid": {"bbox": [[0, 0]], "cell_size": 0.1}},
        )
        assert run(["predict", "--config", cfg, "--out", out]) == 2
        assert "bbox" in capsys.readouterr().err


class TestProvenance:
    def test_lines_appended_with_hash(self, tmp_path):
        raster = constant_raster(tmp_path / "truth.asc")
        out = tmp_path / "run"
        cfg = write_config(
            tmp_path / "sim.json",
            {"raster": str(raster), "locations": {"mode": "uniform", "count": 5}},
        )
        run(["simulate", "--config", cfg, "--out", out, "--seed", 1])
        run(["simulate", "--config", cfg, "--out", out, "--seed", 2])
        lines = [json.loads(l) for l in (out / "provenance.jsonl").read_text().splitlines()]
        assert len(lines) == 2
        assert lines[0]["config_sha256"] == lines[1]["config_sha256"]
        assert lines[0]["seed"] == 1 and lines[1]["seed"] == 2
        assert lines[0]["command"] == "simulate"
        assert "survey.csv" in lines[0]["outputs"]


class TestThreading:
    def test_single_thread_uses_no_worker_pool(self, tmp_path):
        raster = constant_raster(tmp_path / "truth.asc")
        out = tmp_path / "run"
        sim_cfg = write_config(
            tmp_path / "sim.json",
            {"raster": str(raster), "locations": {"mode": "uniform", "count": 30}},
        )
        run(["simulate", "--config", sim_cfg, "--out", out, "--seed", 3])
        cv_cfg = write_config(
            tmp_path / "cv.json",
            {"model": "sprf", "survey": str(out / "survey.csv"),
             "sprf": {"num_trees": 20, "metric": "euclidean"}, "cv": {"k": 3}},
        )
        before = util.PARALLEL_INVOCATIONS
        assert run(["cv", "--config", cv_cfg, "--out", out, "--seed", 3, "--threads", 1]) == 0
        assert util.PARALLEL_INVOCATIONS == before

        assert run(["cv", "--config", cv_cfg, "--out", out, "--seed", 3, "--threads", 3]) == 0
        assert util.PARALLEL_INVOCATIONS > before

    def test_thread_count_does_not_change_outputs(self, tmp_path):
        raster = constant_raster(tmp_path / "truth.asc")
        results = {}
        for threads in (1, 3):
            out = tmp_path / f"t{threads}"
            sim_cfg = write_config(
                tmp_path / f"sim{threads}.json",
                {"raster": str(raster), "locations": {"mode": "uniform", "count": 40}},
            )
            run(["simulate", "--config", sim_cfg, "--out", out, "--seed", 4])
            cv_cfg = write_config(
                tmp_path / f"cv{threads}.json",
                {"model": "sprf", "survey": str(out / "survey.csv"),
                 "sprf": {"num_trees": 20, "metric": "euclidean"}, "cv": {"k": 2}},
            )
            run(["cv", "--config", cv_cfg, "--out", out, "--seed", 4,
                 "--threads", threads])
            results[threads] = (out / "records.csv").read_bytes()
        assert results[1] == results[3]
