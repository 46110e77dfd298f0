"""Uniform fit/predict contract over the model families.

Every fitter takes a list of SurveyRecords and returns a predictor
callable: predictor(locations) -> (point_estimate, sd). The point
estimate follows each model's native convention: GP and FRK report means,
the quantile forest and the lattice GMRF report medians.
"""

from __future__ import annotations

import numpy as np

from . import frk, gpcore, lgm, sprf
from .errors import ConfigError
from .geodata import records_bbox

MODEL_NAMES = ("gp", "sprf", "frk", "lgm", "constant")


def default_gp_block() -> dict:
    return {
        "cov": {"family": "exponential", "variance": 1.0, "range": 1.0, "metric": "euclidean"},
        "vecchia": None,
        "boosting": {
            "rounds": 247,
            "learning_rate": 0.01,
            "num_leaves": 1024,
            "max_depth": 6,
            "min_data_in_leaf": 5,
        },
        "early_stop": False,
    }


def make_fitter(model: str, config: dict, domain_bbox=None, seed: int = 0, threads: int = 1):
    """Resolve a model-config block into a records -> predictor callable."""
    if model not in MODEL_NAMES:
        raise ConfigError(f"model must be one of {MODEL_NAMES}, got {model!r}")

    if model == "gp":
        block = {**default_gp_block(), **config.get("gp", {})}
        spec = gpcore.GpModelSpec.from_json(block)

        def fit_gp(records):
            fit_res = gpcore.fit(records, spec)

            def predictor(locs):
                return gpcore.predict(fit_res, locs)

            predictor.fit_result = fit_res
            return predictor

        return fit_gp

    if model == "sprf":
        block = dict(config.get("sprf", {}))
        block.setdefault("seed", seed)
        spec = sprf.SprfSpec.from_json(block)

        def fit_sprf(records):
            fit_res = sprf.fit(records, spec, threads=threads)

            def predictor(locs):
                summary = sprf.predict_summary(fit_res, locs)
                return summary["median"], summary["sd"]

            predictor.fit_result = fit_res
            return predictor

        return fit_sprf

    if model == "frk":
        block = config.get("frk", {})
        nres = int(block.get("nres", 2))
        regular = int(block.get("regular", 1))
        scale_aperture = float(block.get("scale_aperture", 1.25))
        bau_cell = float(block.get("bau_cell_size", 0.1))
        n_mc = int(block.get("n_mc", 400))

        def fit_frk(records):
            bbox = domain_bbox if domain_bbox is not None else records_bbox(records)
            basis = frk.place_basis(bbox, nres=nres, regular=regular, scale_aperture=scale_aperture)
            fit_res = frk.fit(records, bau_cell, basis, bbox=bbox)

            def predictor(locs):
                return frk.predict_at(fit_res, locs, n_mc=n_mc, seed=seed, threads=threads)

            predictor.fit_result = fit_res
            return predictor

        return fit_frk

    if model == "lgm":
        spec = lgm.LgmSpec.from_json(config.get("lgm", {}))

        def fit_lgm(records):
            fit_res = lgm.fit(records, spec, bbox=domain_bbox)

            def predictor(locs):
                pred = lgm.predict(fit_res, locs)
                return pred["median"], pred["sd"]

            predictor.fit_result = fit_res
            return predictor

        return fit_lgm

    def fit_constant(records):
        y = np.array([r.prevalence for r in records])
        mean = float(y.mean())
        sd = float(y.std())

        def predictor(locs):
            n = len(locs)
            return np.full(n, mean), np.full(n, sd)

        predictor.fit_result = (mean, sd)
        return predictor

    return fit_constant
