"""Spatially blocked cross-validation and accuracy/interval metrics.

Folds come from k-means clustering of the survey coordinates (close-by
points act as proxies under random folding, so blocks measure honest
extrapolation). Interval coverage follows the within-1SD / within-2SD
definitions with interval endpoints trimmed to [0, 1]; within-2SD is
recorded both exclusively (not within 1SD but within 2SD) and
cumulatively, with "width" meaning the predicted standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geodata import Location, locations_to_array
from .util import parallel_map


@dataclass
class FoldAssignment:
    folds: np.ndarray  # per-record fold index in 1..k
    centroids: list  # k Locations
    k: int

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)


def _lloyd(xy: np.ndarray, k: int, rng: np.random.Generator):
    """One k-means run: k-means++ seeding then Lloyd to convergence."""
    n = len(xy)
    centres = np.empty((k, 2))
    first = rng.integers(0, n)
    centres[0] = xy[first]
    d2 = ((xy - centres[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centres[j] = xy[rng.integers(0, n)]
        else:
            cum = np.cumsum(d2 / total)
            centres[j] = xy[np.searchsorted(cum, rng.uniform())]
        d2 = np.minimum(d2, ((xy - centres[j]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(200):
        dist = ((xy[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist.argmin(axis=1)  # argmin ties -> lowest index
        for j in range(k):
            members = xy[new_labels == j]
            if len(members) == 0:
                # reseed an empty cluster at the farthest point
                far = dist[np.arange(n), new_labels].argmax()
                centres[j] = xy[far]
                new_labels[far] = j
            else:
                centres[j] = members.mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    dist = ((xy[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    labels = dist.argmin(axis=1)
    wcss = float(dist[np.arange(n), labels].sum())
    return labels, centres, wcss


def kmeans_folds(pts, k: int, seed: int = 0, restarts: int = 50) -> FoldAssignment:
    """Spatial blocks: best-of-`restarts` k-means on the coordinates."""
    xy = locations_to_array(pts)
    distinct = len(np.unique(xy, axis=0))
    if k > distinct:
        raise ValueError(f"k = {k} exceeds the {distinct} distinct locations")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels, centres, wcss = _lloyd(xy, k, rng)
        if best is None or wcss < best[2] - 1e-12:
            best = (labels, centres, wcss)
    labels, centres, _ = best
    return FoldAssignment(
        folds=labels + 1,
        centroids=[Location(float(a), float(b)) for a, b in centres],
        k=k,
    )


@dataclass
class CvResult:
    yhat: np.ndarray
    sd: np.ndarray
    folds: np.ndarray
    failed_folds: list


def cv_run(records, fitter, folds: FoldAssignment, threads: int = 1) -> CvResult:
    """Hold out each fold, fit on the rest, predict the held-out records.

    `fitter(train_records)` returns predict(locations) -> (estimate, sd).
    A fold whose fit fails is flagged and its predictions set to NaN.
    """
    if folds.k < 2:
        raise ValueError("need at least 2 folds")
    records = list(records)
    n = len(records)
    yhat = np.full(n, np.nan)
    sd = np.full(n, np.nan)

    def run_fold(f):
        test_idx = folds.indices(f)
        train = [records[i] for i in range(n) if folds.folds[i] != f]
        try:
            predictor = fitter(train)
            est, s = predictor([records[i].loc for i in test_idx])
            return f, test_idx, np.asarray(est, dtype=float), np.asarray(s, dtype=float)
        except Exception as exc:  # noqa: BLE001 - fold failures are data
            return f, test_idx, exc, None

    failed = []
    for f, test_idx, est, s in parallel_map(run_fold, range(1, folds.k + 1), threads=threads):
        if s is None:
            failed.append((f, str(est)))
            continue
        yhat[test_idx] = est
        sd[test_idx] = s
    return CvResult(yhat=yhat, sd=sd, folds=folds.folds.copy(), failed_folds=failed)


def interval_coverage(y, yhat, sd):
    """Within-1SD / within-2SD flags with interval endpoints trimmed to [0, 1].

    within2_exclusive follows the exclusive definition (not within 1SD and
    within 2SD); within2_cumulative is the plain 2SD check.
    """
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd < 0):
        raise ValueError("sd must be >= 0")

    def inside(width):
        lo = np.clip(yhat - width * sd, 0.0, 1.0)
        hi = np.clip(yhat + width * sd, 0.0, 1.0)
        return (y >= lo) & (y <= hi)

    within1 = inside(1.0)
    within2_cum = inside(2.0)
    return {
        "within1": within1,
        "within2_exclusive": within2_cum & ~within1,
        "within2_cumulative": within2_cum,
    }


@dataclass
class MetricsReport:
    rmse: float
    pearson_correlation: float  # None when a side has zero variance
    prop_abs_err: dict  # threshold -> proportion strictly below
    pct_within_1sd: float
    pct_within_2sd_exclusive: float
    pct_within_2sd_cumulative: float
    width_mean: float
    width_sd: float
    n: int
    strata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "rmse": self.rmse,
            "pearson_correlation": self.pearson_correlation,
            "prop_abs_err": {str(k): v for k, v in self.prop_abs_err.items()},
            "pct_within_1sd": self.pct_within_1sd,
            "pct_within_2sd_exclusive": self.pct_within_2sd_exclusive,
            "pct_within_2sd_cumulative": self.pct_within_2sd_cumulative,
            "width_mean": self.width_mean,
            "width_sd": self.width_sd,
            "n": self.n,
        }
        if self.strata:
            out["strata"] = {name: rep.to_json() for name, rep in self.strata.items()}
        return out


ERROR_THRESHOLDS = (0.05, 0.1, 0.2)


def metrics(y, yhat, sd, strata=None) -> MetricsReport:
    """Accuracy and interval metrics; per-stratum breakdowns when given.

    `strata` is an optional per-record label array (e.g. from
    density_strata); "width" is the predicted standard deviation.
    """
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if not (len(y) == len(yhat) == len(sd)) or len(y) < 2:
        raise ValueError("need equal-length arrays with at least 2 entries")
    err = np.abs(y - yhat)
    rmse = float(np.sqrt(np.mean((y - yhat) ** 2)))
    if np.std(yhat) == 0.0 or np.std(y) == 0.0:
        corr = None
    else:
        corr = float(np.corrcoef(y, yhat)[0, 1])
    cov = interval_coverage(y, yhat, sd)
    report = MetricsReport(
        rmse=rmse,
        pearson_correlation=corr,
        prop_abs_err={t: float(np.mean(err < t)) for t in ERROR_THRESHOLDS},
        pct_within_1sd=float(np.mean(cov["within1"]) * 100.0),
        pct_within_2sd_exclusive=float(np.mean(cov["within2_exclusive"]) * 100.0),
        pct_within_2sd_cumulative=float(np.mean(cov["within2_cumulative"]) * 100.0),
        width_mean=float(np.mean(sd)),
        width_sd=float(np.std(sd)),
        n=len(y),
    )
    if strata is not None:
        strata = np.asarray(strata)
        for name in ("low", "medium", "high"):
            idx = np.flatnonzero(strata == name)
            if len(idx) >= 2:
                report.strata[name] = metrics(y[idx], yhat[idx], sd[idx])
    return report


DENSITY_LOW = 0.2
DENSITY_HIGH = 0.4


def density_strata(pts):
    """Normalized Gaussian-KDE density of the locations plus a stratum label.

    Scott's rule sets the per-axis bandwidth; densities rescale by their
    maximum so the 0.2 / 0.4 stratum cutoffs act on a [0, 1] scale.
    """
    xy = locations_to_array(pts)
    n = len(xy)
    if n < 2:
        raise ValueError("need at least 2 points")
    sx = float(np.std(xy[:, 0]))
    sy = float(np.std(xy[:, 1]))
    if sx == 0.0 and sy == 0.0:
        density = np.ones(n)
    else:
        hx = max(sx, 1e-12) * n ** (-1.0 / 6.0)
        hy = max(sy, 1e-12) * n ** (-1.0 / 6.0)
        dx = (xy[:, None, 0] - xy[None, :, 0]) / hx
        dy = (xy[:, None, 1] - xy[None, :, 1]) / hy
        kern = np.exp(-0.5 * (dx**2 + dy**2)) / (2.0 * math.pi * hx * hy)
        density = kern.mean(axis=1)
        density = density / density.max()
    labels = np.where(
        density <= DENSITY_LOW, "low", np.where(density <= DENSITY_HIGH, "medium", "high")
    )
    return density, labels
