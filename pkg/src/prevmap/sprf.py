"""Spatial random forest on distance features.

Each observation's feature vector holds its distances to every training
location, so the design matrix of the training set is simply the pairwise
distance matrix. Quantile regression forests keep the full response
multiset in each leaf; point predictions are pooled medians and the
standard deviation comes from the IQR under a normal assumption
(SD = IQR / 1.34898).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geodata import DistanceMetric, locations_to_array, pairwise_distances
from .trees import RegressionTree, TreeParams
from .util import parallel_map

IQR_TO_SD = 1.34898


@dataclass
class SprfSpec:
    num_trees: int = 500
    mtry: int = None  # None -> floor(sqrt(n_features)) at fit time
    min_node_size: int = 5
    metric: DistanceMetric = DistanceMetric.GREAT_CIRCLE
    rng_seed: int = 0

    @classmethod
    def from_json(cls, d: dict) -> "SprfSpec":
        return cls(
            num_trees=int(d.get("num_trees", 500)),
            mtry=int(d["mtry"]) if d.get("mtry") is not None else None,
            min_node_size=int(d.get("min_node_size", 5)),
            metric=DistanceMetric.from_string(d.get("metric", "greatcircle")),
            rng_seed=int(d.get("seed", 0)),
        )


class SprfFit:
    """Fitted forest: trees plus per-leaf training-response membership."""

    def __init__(self, spec, train_xy, y, trees, leaf_members, leaf_sizes):
        self.spec = spec
        self.train_xy = train_xy
        self.y = y
        self.trees = trees
        # per tree: leaf id -> array of training row indices routed there
        self.leaf_members = leaf_members
        self.leaf_sizes = leaf_sizes


def build_features(train_pts, query_pts, metric: DistanceMetric) -> np.ndarray:
    """Feature matrix: distance from each query to each training location."""
    if len(train_pts) == 0:
        raise ValueError("need at least one training point")
    return pairwise_distances(
        locations_to_array(query_pts), locations_to_array(train_pts), metric
    )


def fit(records, spec: SprfSpec, threads: int = 1) -> SprfFit:
    """Grow the forest on bootstrap resamples of the distance-feature rows.

    After growth every tree is re-populated by routing the full training
    set to its leaves, so leaves hold original responses (with the
    bootstrap used only to diversify tree shapes).
    """
    if len(records) < 2:
        raise ValueError("need at least 2 records")
    train_pts = [r.loc for r in records]
    y = np.array([r.prevalence for r in records])
    X = build_features(train_pts, train_pts, spec.metric)
    n = len(records)
    mtry = spec.mtry if spec.mtry is not None else max(1, math.floor(math.sqrt(n)))
    if mtry > n:
        raise ValueError(f"mtry {mtry} exceeds the {n} available distance columns")
    params = TreeParams(mtry=mtry, min_split=max(2, spec.min_node_size), min_leaf=1)
    seeds = np.random.SeedSequence(spec.rng_seed).spawn(spec.num_trees)

    def grow(seed):
        rng = np.random.default_rng(seed)
        boot = rng.integers(0, n, size=n)
        tree = RegressionTree(params).fit(X[boot], y[boot], rng)
        leaf_of_train = tree.apply(X)
        members = {}
        for leaf in np.unique(leaf_of_train):
            members[int(leaf)] = np.flatnonzero(leaf_of_train == leaf)
        sizes = {leaf: len(rows) for leaf, rows in members.items()}
        return tree, members, sizes

    grown = parallel_map(grow, seeds, threads=threads)
    trees = [g[0] for g in grown]
    leaf_members = [g[1] for g in grown]
    leaf_sizes = [g[2] for g in grown]
    return SprfFit(spec, locations_to_array(train_pts), y, trees, leaf_members, leaf_sizes)


def _pooled_weights(fit: SprfFit, pts) -> np.ndarray:
    """Meinshausen weights: (n_query, n_train), rows summing to 1.

    Weight of training point i at query q averages 1/|leaf| over the trees
    where i shares q's leaf.
    """
    Q = pairwise_distances(locations_to_array(pts), fit.train_xy, fit.spec.metric)
    nq = len(Q)
    w = np.zeros((nq, len(fit.y)))
    for tree, members, sizes in zip(fit.trees, fit.leaf_members, fit.leaf_sizes):
        q_leaf = tree.apply(Q)
        for leaf in np.unique(q_leaf):
            rows = np.flatnonzero(q_leaf == leaf)
            cohab = members.get(int(leaf))
            if cohab is None:
                continue  # cannot happen: every leaf holds >= 1 routed point
            w[np.ix_(rows, cohab)] += 1.0 / sizes[int(leaf)]
    return w / len(fit.trees)


def predict_quantiles(fit: SprfFit, pts, probs) -> np.ndarray:
    """Pooled empirical quantiles, shape (n_query, n_probs).

    Quantiles are of type Q(p) = inf{y : F(y) >= p}, so every output is an
    element of the training response multiset.
    """
    probs = list(probs)
    if len(probs) == 0:
        raise ValueError("probs must be non-empty")
    if any(not (0.0 < p < 1.0) for p in probs):
        raise ValueError("probs must lie in (0, 1)")
    if sorted(probs) != probs:
        raise ValueError("probs must be sorted ascending")
    w = _pooled_weights(fit, pts)
    order = np.argsort(fit.y, kind="stable")
    y_sorted = fit.y[order]
    cdf = np.cumsum(w[:, order], axis=1)
    total = cdf[:, -1:]
    out = np.empty((len(w), len(probs)))
    for j, p in enumerate(probs):
        target = p * total - 1e-12
        first = np.argmax(cdf >= target, axis=1)
        out[:, j] = y_sorted[first]
    return out


def predict_summary(fit: SprfFit, pts) -> dict:
    """Median point prediction, pooled mean, and IQR-derived sd per query."""
    w = _pooled_weights(fit, pts)
    order = np.argsort(fit.y, kind="stable")
    y_sorted = fit.y[order]
    cdf = np.cumsum(w[:, order], axis=1)
    total = cdf[:, -1:]
    qs = {}
    for p in (0.25, 0.5, 0.75):
        first = np.argmax(cdf >= p * total - 1e-12, axis=1)
        qs[p] = y_sorted[first]
    mean = w @ fit.y / w.sum(axis=1)
    sd = sd_from_iqr(qs[0.25], qs[0.75])
    return {"median": qs[0.5], "mean": mean, "sd": sd, "q25": qs[0.25], "q75": qs[0.75]}


def sd_from_iqr(q25, q75):
    """Normal-approximation standard deviation from an interquartile range."""
    q25 = np.asarray(q25, dtype=float)
    q75 = np.asarray(q75, dtype=float)
    if np.any(q75 < q25):
        raise ValueError("q75 must be >= q25")
    out = (q75 - q25) / IQR_TO_SD
    if out.ndim == 0:
        return float(out)
    return out
