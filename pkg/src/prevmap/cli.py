"""Command-line orchestration: fit, predict, simulate, cv, bench.

Each run reads one JSON config, writes its artifacts into --out, and
appends a provenance line (config hash, seed, version) to
provenance.jsonl there. With --threads 1 (the default) the process pins
BLAS pools to a single thread before numpy loads, so timing runs match
the single-threaded protocol; outputs are bit-identical across reruns
with the same config and seed (timing fields aside).

Heavy imports stay inside main() so the thread pinning can happen first.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

PROVENANCE_FILE = "provenance.jsonl"


def _pin_blas_threads(threads: int) -> None:
    if "numpy" in sys.modules:
        return  # too late; library-level pools keep their defaults
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, str(threads))


def _load_config(path: str) -> dict:
    from .errors import ConfigError

    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with p.open(encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _require(cfg: dict, key: str, kind, where: str = "config"):
    from .errors import ConfigError

    if key not in cfg:
        raise ConfigError(f"{where}: missing required field {key!r}")
    val = cfg[key]
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"{where}: field {key!r} must be {kind}, got {type(val).__name__}")
    return val


def _require_path(cfg: dict, key: str, where: str = "config") -> Path:
    from .errors import ConfigError

    p = Path(_require(cfg, key, str, where))
    if not p.exists():
        raise ConfigError(f"{where}: path in field {key!r} does not exist: {p}")
    return p


def _parse_grid(cfg: dict, where: str = "config.grid"):
    from .errors import ConfigError
    from .geodata import Location, build_grid

    bbox = _require(cfg, "bbox", list, where)
    if (
        len(bbox) != 2
        or any(len(c) != 2 for c in bbox)
    ):
        raise ConfigError(f"{where}: bbox must be [[lon, lat], [lon, lat]]")
    cell = _require(cfg, "cell_size", (int, float), where)
    try:
        sw = Location(float(bbox[0][0]), float(bbox[0][1]))
        ne = Location(float(bbox[1][0]), float(bbox[1][1]))
        return build_grid((sw, ne), float(cell)), (sw, ne)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _append_provenance(out_dir: Path, command: str, config: dict, seed: int,
                       threads: int, outputs: list) -> None:
    from . import __version__

    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    line = {
        "command": command,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "threads": threads,
        "version": __version__,
        "outputs": outputs,
    }
    with (out_dir / PROVENANCE_FILE).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(line, sort_keys=True) + "\n")


def _model_name(cfg: dict) -> str:
    from .errors import ConfigError
    from .models import MODEL_NAMES

    name = _require(cfg, "model", str)
    if name not in MODEL_NAMES:
        raise ConfigError(f"config: model must be one of {MODEL_NAMES}, got {name!r}")
    return name


def cmd_simulate(cfg: dict, out_dir: Path, seed: int, threads: int) -> list:
    from .errors import ConfigError
    from .geodata import parse_survey_csv, read_asc, write_survey_csv
    from .simkit import SimConfig, simulate

    raster_path = _require_path(cfg, "raster")
    raster = read_asc(raster_path)
    loc_cfg = _require(cfg, "locations", dict)
    mode = _require(loc_cfg, "mode", str, "config.locations")
    noise_sd = float(cfg.get("noise_sd", 0.0))
    tests = cfg.get("tests_per_site", 85)

    if mode == "uniform":
        count = int(_require(loc_cfg, "count", int, "config.locations"))
        sim_cfg = SimConfig(
            raster=raster, uniform_count=count, tests_per_site=tests,
            noise_sd=noise_sd, rng_seed=seed,
        )
    elif mode == "at_points":
        survey = parse_survey_csv(_require_path(loc_cfg, "survey", "config.locations"))
        site_tests = [r.examined for r in survey] if tests == "from_survey" else tests
        sim_cfg = SimConfig(
            raster=raster, locations=[r.loc for r in survey],
            tests_per_site=site_tests, noise_sd=noise_sd, rng_seed=seed,
        )
    else:
        raise ConfigError(f"config.locations: mode must be uniform or at_points, got {mode!r}")

    result = simulate(sim_cfg)
    out_csv = out_dir / "survey.csv"
    write_survey_csv(result.records, out_csv)
    sidecar = {
        "seed": seed,
        "raster": str(raster_path),
        "noise_sd": noise_sd,
        "n_records": len(result.records),
        "n_dropped_nodata": result.n_dropped,
    }
    with (out_dir / "survey_provenance.json").open("w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ["survey.csv", "survey_provenance.json"]


def cmd_fit(cfg: dict, out_dir: Path, seed: int, threads: int) -> list:
    import pickle

    from .geodata import parse_survey_csv
    from .models import make_fitter

    model = _model_name(cfg)
    records = parse_survey_csv(_require_path(cfg, "survey"))
    domain_bbox = None
    if "grid" in cfg:
        _, domain_bbox = _parse_grid(cfg["grid"])
    fitter = make_fitter(model, cfg, domain_bbox=domain_bbox, seed=seed, threads=threads)
    predictor = fitter(records)
    payload = {"model": model, "config": cfg, "seed": seed, "fit": predictor.fit_result}
    with (out_dir / "model.pkl").open("wb") as fh:
        pickle.dump(payload, fh)
    return ["model.pkl"]


def _predict_with_payload(payload: dict, locs, seed: int, threads: int):
    from . import frk, gpcore, lgm, sprf

    model = payload["model"]
    fit_res = payload["fit"]
    if model == "gp":
        return gpcore.predict(fit_res, locs)
    if model == "sprf":
        summary = sprf.predict_summary(fit_res, locs)
        return summary["median"], summary["sd"]
    if model == "frk":
        n_mc = int(payload["config"].get("frk", {}).get("n_mc", 400))
        return frk.predict_at(fit_res, locs, n_mc=n_mc, seed=seed, threads=threads)
    if model == "lgm":
        pred = lgm.predict(fit_res, locs)
        return pred["median"], pred["sd"]
    mean, sd = fit_res
    import numpy as np

    return np.full(len(locs), mean), np.full(len(locs), sd)


def cmd_predict(cfg: dict, out_dir: Path, seed: int, threads: int) -> list:
    import pickle

    from .geodata import Raster, write_asc

    with _require_path(cfg, "model_file").open("rb") as fh:
        payload = pickle.load(fh)
    grid, _ = _parse_grid(_require(cfg, "grid", dict))
    locs = grid.cell_centres()
    est, sd = _predict_with_payload(payload, locs, seed, threads)
    mean_r = Raster(grid.origin, grid.cell_size, est.reshape(grid.n_rows, grid.n_cols))
    sd_r = Raster(grid.origin, grid.cell_size, sd.reshape(grid.n_rows, grid.n_cols))
    write_asc(mean_r, out_dir / "mean.asc")
    write_asc(sd_r, out_dir / "sd.asc")
    return ["mean.asc", "sd.asc"]


def cmd_cv(cfg: dict, out_dir: Path, seed: int, threads: int) -> list:
    import numpy as np

    from .evalkit import cv_run, density_strata, interval_coverage, kmeans_folds, metrics
    from .geodata import parse_survey_csv, records_bbox
    from .models import make_fitter

    model = _model_name(cfg)
    records = parse_survey_csv(_require_path(cfg, "survey"))
    cv_cfg = _require(cfg, "cv", dict)
    k = int(_require(cv_cfg, "k", int, "config.cv"))
    fold_seed = int(cv_cfg.get("seed", seed))
    folds = kmeans_folds([r.loc for r in records], k, seed=fold_seed)
    fitter = make_fitter(
        model, cfg, domain_bbox=records_bbox(records), seed=seed, threads=threads
    )
    result = cv_run(records, fitter, folds, threads=threads)

    y = np.array([r.prevalence for r in records])
    ok = ~np.isnan(result.yhat)
    _, strata = density_strata([r.loc for r in records])
    report = metrics(y[ok], result.yhat[ok], result.sd[ok], strata=strata[ok])
    out = report.to_json()
    out["model"] = model
    out["k"] = k
    out["failed_folds"] = [{"fold": f, "error": msg} for f, msg in result.failed_folds]
    with (out_dir / "metrics.json").open("w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")

    cov = interval_coverage(y[ok], result.yhat[ok], result.sd[ok])
    within1 = np.zeros(len(records), dtype=bool)
    within2 = np.zeros(len(records), dtype=bool)
    within1[ok] = cov["within1"]
    within2[ok] = cov["within2_exclusive"]
    with (out_dir / "records.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write("record_id,fold,y,yhat,sd,within1,within2\n")
        for i, rec in enumerate(records):
            yh = "" if np.isnan(result.yhat[i]) else f"{result.yhat[i]:.10g}"
            sdv = "" if np.isnan(result.sd[i]) else f"{result.sd[i]:.10g}"
            fh.write(
                f"{i},{folds.folds[i]},{y[i]:.10g},{yh},{sdv},"
                f"{str(bool(within1[i])).lower()},{str(bool(within2[i])).lower()}\n"
            )
    return ["metrics.json", "records.csv"]


def bench_scaling(model_names: list, sizes: list, raster, seed: int, cfg: dict,
                  threads: int = 1) -> list:
    """Simulate, fit, and predict per (model, size); record times and RSS.

    Exact-GP cells above `gp_exact_cap` (default 4000) are flagged skipped
    instead of run; failures are recorded and the sweep continues.
    """
    from .errors import ConfigError
    from .geodata import records_bbox
    from .models import make_fitter
    from .simkit import SimConfig, simulate
    from .util import PeakRssSampler

    if sorted(sizes) != list(sizes):
        raise ConfigError("config.bench: sizes must be ascending")
    gp_cap = int(cfg.get("gp_exact_cap", 4000))
    tests = cfg.get("tests_per_site", 85)
    rows = []
    for model in model_names:
        for n in sizes:
            row = {"model": model, "n_records": n}
            gp_block = cfg.get("gp", {})
            if model == "gp" and not gp_block.get("vecchia") and n > gp_cap:
                row["skipped"] = f"exact GP capped at n = {gp_cap}"
                rows.append(row)
                continue
            sim = simulate(
                SimConfig(raster=raster, uniform_count=n, tests_per_site=tests,
                          noise_sd=0.0, rng_seed=seed)
            )
            records = sim.records
            bbox = records_bbox(records)
            pred_locs = raster.cell_centres()
            try:
                with PeakRssSampler() as sampler:
                    t0 = time.perf_counter()
                    fitter = make_fitter(model, cfg, domain_bbox=bbox, seed=seed,
                                         threads=threads)
                    predictor = fitter(records)
                    t1 = time.perf_counter()
                    predictor(pred_locs)
                    t2 = time.perf_counter()
                row.update(
                    {
                        "fit_time_s": t1 - t0,
                        "predict_time_s": t2 - t1,
                        "wall_time_s": t2 - t0,
                        "peak_rss_bytes": sampler.peak_bytes,
                    }
                )
            except Exception as exc:  # noqa: BLE001 - sweep continues
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    return rows


def cmd_bench(cfg: dict, out_dir: Path, seed: int, threads: int) -> list:
    from .errors import ConfigError
    from .geodata import read_asc
    from .models import MODEL_NAMES

    model_names = _require(cfg, "models", list)
    for m in model_names:
        if m not in MODEL_NAMES:
            raise ConfigError(f"config.models: unknown model {m!r}")
    sizes = [int(s) for s in _require(cfg, "sizes", list)]
    raster = read_asc(_require_path(cfg, "raster"))
    rows = bench_scaling(model_names, sizes, raster, seed, cfg, threads=threads)
    with (out_dir / "bench.json").open("w", encoding="utf-8") as fh:
        json.dump({"runs": rows, "seed": seed}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ["bench.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prevmap",
        description="Scalable geostatistical prevalence mapping models and benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides config seed")
        p.add_argument("--threads", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _pin_blas_threads(args.threads)
    from .errors import PrevmapError

    try:
        cfg = _load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](cfg, out_dir, seed, args.threads)
        _append_provenance(out_dir, args.command, cfg, seed, args.threads, outputs)
    except PrevmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
