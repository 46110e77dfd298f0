"""CART-style regression trees with deterministic split selection.

Shared by the distance-feature quantile forest (leaves keep response
multisets) and the boosting step of the GP model (leaves keep means).
Splits maximize variance reduction over `mtry` randomly sampled columns;
equal gains break toward the lowest column index, and within a column
toward the lowest threshold, so identical seeds give identical trees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TreeParams:
    mtry: int
    min_split: int = 2  # node needs at least this many rows to attempt a split
    min_leaf: int = 1  # every child must keep at least this many rows
    max_depth: int = None
    max_leaves: int = None


class RegressionTree:
    """A single fitted regression tree over a dense feature matrix."""

    def __init__(self, params: TreeParams):
        self.params = params
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_mean: list[float] = []
        self.n_leaves = 0

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(np.nan)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_mean.append(np.nan)
        return len(self.feature) - 1

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> "RegressionTree":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        p = self.params
        root = self._new_node()
        # FIFO queue keeps growth order (hence max_leaves truncation) deterministic
        queue = [(root, np.arange(len(y)), 0)]
        pending_leaves = 1
        while queue:
            node, idx, depth = queue.pop(0)
            split = None
            expandable = (
                len(idx) >= max(2, p.min_split)
                and (p.max_depth is None or depth < p.max_depth)
                and (p.max_leaves is None or pending_leaves + 1 <= p.max_leaves)
            )
            if expandable:
                split = self._best_split(X, y, idx, rng)
            if split is None:
                self.leaf_mean[node] = float(y[idx].mean())
                self.n_leaves += 1
                continue
            col, thresh = split
            go_left = X[idx, col] <= thresh
            left_id = self._new_node()
            right_id = self._new_node()
            self.feature[node] = col
            self.threshold[node] = thresh
            self.left[node] = left_id
            self.right[node] = right_id
            pending_leaves += 1
            queue.append((left_id, idx[go_left], depth + 1))
            queue.append((right_id, idx[~go_left], depth + 1))
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.leaf_mean = np.asarray(self.leaf_mean, dtype=float)
        return self

    def _best_split(self, X, y, idx, rng):
        p = self.params
        n_feat = X.shape[1]
        mtry = min(p.mtry, n_feat)
        cols = rng.choice(n_feat, size=mtry, replace=False)
        V = X[np.ix_(idx, cols)]
        m = len(idx)
        order = np.argsort(V, axis=0, kind="stable")
        Vs = np.take_along_axis(V, order, axis=0)
        Ys = y[idx][order]
        prefix = np.cumsum(Ys, axis=0)
        total = prefix[-1, :]
        k = np.arange(1, m)[:, None].astype(float)
        left_sum = prefix[:-1, :]
        score = left_sum**2 / k + (total[None, :] - left_sum) ** 2 / (m - k)
        valid = Vs[:-1, :] < Vs[1:, :]
        if p.min_leaf > 1:
            ks = np.arange(1, m)[:, None]
            valid = valid & (ks >= p.min_leaf) & (m - ks >= p.min_leaf)
        score = np.where(valid, score, -np.inf)
        best_k = score.argmax(axis=0)
        best_score = score[best_k, np.arange(mtry)]
        if not np.any(np.isfinite(best_score)):
            return None
        top = best_score.max()
        base = y[idx].sum() ** 2 / m
        if top <= base + 1e-12 * (abs(base) + 1.0):
            return None  # no variance reduction
        contenders = np.flatnonzero(best_score >= top)
        j = contenders[np.argmin(cols[contenders])]
        kj = best_k[j]
        thresh = 0.5 * (Vs[kj, j] + Vs[kj + 1, j])
        return int(cols[j]), float(thresh)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Node id of the leaf each row of X falls into."""
        X = np.asarray(X, dtype=float)
        out = np.zeros(len(X), dtype=np.int64)
        stack = [(0, np.arange(len(X)))]
        while stack:
            node, rows = stack.pop()
            if len(rows) == 0:
                continue
            if self.left[node] < 0:
                out[rows] = node
                continue
            go_left = X[rows, self.feature[node]] <= self.threshold[node]
            stack.append((self.left[node], rows[go_left]))
            stack.append((self.right[node], rows[~go_left]))
        return out

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_mean[self.apply(X)]
