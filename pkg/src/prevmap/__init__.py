"""Scalable geostatistical models for disease prevalence mapping.

Four model families behind a single fit/predict contract (a boosted
Gaussian process with optional Vecchia approximation, a distance-feature
quantile forest, fixed-rank kriging on areal units, and a lattice GMRF
with Laplace/empirical-Bayes inference), plus synthetic-data generation
and spatially blocked cross-validation.

Heavy submodules are imported lazily so that the CLI can pin BLAS thread
counts before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "geodata",
    "covfn",
    "gpcore",
    "sprf",
    "frk",
    "lgm",
    "simkit",
    "evalkit",
    "models",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
