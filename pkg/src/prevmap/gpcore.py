"""Gaussian-process regression with a boosted fixed effect.

The response is the raw prevalence H/N with model
y ~ N(F + S(x), tau2), S a zero-mean GP. Fitting alternates a quasi-Newton
step on the covariance parameters (sigma1_sq, range, tau_sq), optimized in
log space against the exact or Vecchia-approximated negative log marginal
likelihood, with one boosting update of the fixed effect per round. With
no covariates the boosting update reduces to a learning-rate-scaled step
of the intercept toward the generalized-least-squares residual mean.

The Vecchia approximation factorizes the joint density into univariate
conditionals, each conditioning on at most m_fit nearest previously
ordered neighbours (input order, matching the reference software's
default); prediction conditions each new point on its m_predict nearest
training points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import gammaln, kv

from .covfn import CovarianceSpec, CovFamily
from .errors import FitError, NumericalError
from .geodata import DistanceMetric, locations_to_array, pairwise_distances
from .trees import RegressionTree, TreeParams

LOG_2PI = math.log(2.0 * math.pi)

THETA_FLOOR = 1e-10  # lower box bound for all covariance parameters


@dataclass
class VecchiaSpec:
    m_fit: int = 30
    m_predict: int = 150

    def __post_init__(self):
        if self.m_fit < 1 or self.m_predict < 1:
            raise ValueError("vecchia neighbour counts must be >= 1")


@dataclass
class BoostingSpec:
    rounds: int = 247
    learning_rate: float = 0.01
    num_leaves: int = 1024
    max_depth: int = 6
    min_data_in_leaf: int = 5

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ValueError("learning_rate must be in (0, 1]")


@dataclass
class GpModelSpec:
    cov: CovarianceSpec
    noise_variance: float = None  # initial tau2; None -> var(y)/2 at fit time
    vecchia: VecchiaSpec = None
    boosting: BoostingSpec = field(default_factory=BoostingSpec)
    early_stop: bool = False

    @classmethod
    def from_json(cls, d: dict) -> "GpModelSpec":
        cov = CovarianceSpec.from_json(d["cov"])
        vec = d.get("vecchia")
        boost = d.get("boosting", {})
        return cls(
            cov=cov,
            noise_variance=d.get("noise_variance"),
            vecchia=VecchiaSpec(int(vec["m_fit"]), int(vec["m_predict"])) if vec else None,
            boosting=BoostingSpec(
                rounds=int(boost.get("rounds", 247)),
                learning_rate=float(boost.get("learning_rate", 0.01)),
                num_leaves=int(boost.get("num_leaves", 1024)),
                max_depth=int(boost.get("max_depth", 6)),
                min_data_in_leaf=int(boost.get("min_data_in_leaf", 5)),
            ),
            early_stop=bool(d.get("early_stop", False)),
        )


class GpFit:
    """Fitted model state: parameters, training reference, and solve cache."""

    def __init__(self, spec, train_xy, y, F_train, intercept, theta, nll_trace, trees=None):
        self.spec = spec
        self.train_xy = train_xy
        self.y = y
        self.F_train = F_train
        self.intercept = intercept
        self.theta = theta  # (sigma1_sq, range, tau_sq)
        self.nll_trace = nll_trace
        self.trees = trees or []
        self._chol = None
        self._alpha = None

    def _ensure_cache(self):
        if self._chol is None:
            psi = _psi_matrix(self.train_xy, self.spec.cov, self.theta)
            self._chol = _chol(psi)
            resid = self.y - self.F_train
            self._alpha = cho_solve((self._chol, True), resid)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_chol"] = None  # solve cache rebuilds on demand
        state["_alpha"] = None
        return state


# ---------------------------------------------------------------------------
# correlation kernels on raw distance arrays (any shape)
# ---------------------------------------------------------------------------


def _correlation(cov: CovarianceSpec, rho: float, d: np.ndarray) -> np.ndarray:
    if cov.family is CovFamily.EXPONENTIAL:
        return np.exp(-d / rho)
    if cov.family is CovFamily.SQUARED_EXPONENTIAL:
        return np.exp(-0.5 * (d / rho) ** 2)
    lam = cov.smoothness
    x = d / rho
    if lam == 0.5:
        return np.exp(-x)
    if lam == 1.5:
        return (1.0 + x) * np.exp(-x)
    if lam == 2.5:
        return (1.0 + x + x * x / 3.0) * np.exp(-x)
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        logc = (1.0 - lam) * math.log(2.0) - gammaln(lam) + lam * np.log(xp)
        with np.errstate(over="ignore", invalid="ignore"):
            val = np.exp(logc) * kv(lam, xp)
        out[pos] = np.where(np.isfinite(val), val, 0.0)
    return out


def _correlation_drho(cov: CovarianceSpec, rho: float, d: np.ndarray) -> np.ndarray:
    """Derivative of the correlation with respect to the range parameter."""
    if cov.family is CovFamily.EXPONENTIAL:
        return (d / rho**2) * np.exp(-d / rho)
    if cov.family is CovFamily.SQUARED_EXPONENTIAL:
        return (d**2 / rho**3) * np.exp(-0.5 * (d / rho) ** 2)
    lam = cov.smoothness
    x = d / rho
    # d/dx [x^lam K_lam(x)] = -x^lam K_{lam-1}(x); chain rule with x = d/rho
    out = np.zeros_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        logc = (1.0 - lam) * math.log(2.0) - gammaln(lam) + lam * np.log(xp)
        with np.errstate(over="ignore", invalid="ignore"):
            val = np.exp(logc) * kv(lam - 1.0, xp) * (xp / rho)
        out[pos] = np.where(np.isfinite(val), val, 0.0)
    return out


def _psi_from_dist(d: np.ndarray, cov: CovarianceSpec, theta) -> np.ndarray:
    sigma1_sq, rho, tau_sq = theta
    psi = sigma1_sq * _correlation(cov, rho, d)
    if psi.ndim >= 2 and psi.shape[-1] == psi.shape[-2]:
        eye = np.eye(psi.shape[-1])
        psi = psi + tau_sq * eye
    return psi


def _psi_matrix(xy: np.ndarray, cov: CovarianceSpec, theta) -> np.ndarray:
    d = pairwise_distances(xy, xy, cov.metric)
    return _psi_from_dist(d, cov, theta)


def _chol(mat: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(mat)[0])
        raise NumericalError(
            f"GP covariance not positive definite (smallest pivot {smallest:.3e})"
        )


# ---------------------------------------------------------------------------
# negative log marginal likelihood: exact and Vecchia
# ---------------------------------------------------------------------------


def _nll_from_dist(y, F, theta, d, spec: CovarianceSpec) -> float:
    psi = _psi_from_dist(d, spec, theta)
    L = _chol(psi)
    r = np.asarray(y, dtype=float) - np.asarray(F, dtype=float)
    z = solve_triangular(L, r, lower=True)
    return float(0.5 * z @ z + np.log(np.diag(L)).sum() + 0.5 * len(y) * LOG_2PI)


def gp_nll(y, F, theta, pts, spec: CovarianceSpec) -> float:
    """Exact dense NLL: 0.5 r' Psi^-1 r + 0.5 log det Psi + n/2 log 2pi."""
    xy = pts if isinstance(pts, np.ndarray) else locations_to_array(pts)
    d = pairwise_distances(xy, xy, spec.metric)
    return _nll_from_dist(y, F, theta, d, spec)


def _nll_grad_from_dist(y, F, theta, d, spec: CovarianceSpec):
    y = np.asarray(y, dtype=float)
    F = np.asarray(F, dtype=float)
    sigma1_sq, rho, tau_sq = theta
    R = _correlation(spec, rho, d)
    psi = sigma1_sq * R + tau_sq * np.eye(len(y))
    L = _chol(psi)
    r = y - F
    alpha = cho_solve((L, True), r)
    psi_inv = cho_solve((L, True), np.eye(len(y)))
    nll = float(0.5 * r @ alpha + np.log(np.diag(L)).sum() + 0.5 * len(y) * LOG_2PI)

    dR = _correlation_drho(spec, rho, d)

    def dir_deriv(dpsi):
        return 0.5 * (psi_inv * dpsi).sum() - 0.5 * alpha @ dpsi @ alpha

    g_sigma = dir_deriv(R) * sigma1_sq
    g_rho = dir_deriv(sigma1_sq * dR) * rho
    g_tau = (0.5 * np.trace(psi_inv) - 0.5 * alpha @ alpha) * tau_sq
    return nll, np.array([g_sigma, g_rho, g_tau])


def gp_nll_grad(y, F, theta, pts, spec: CovarianceSpec):
    """NLL and its gradient with respect to log(sigma1_sq, range, tau_sq)."""
    xy = pts if isinstance(pts, np.ndarray) else locations_to_array(pts)
    d = pairwise_distances(xy, xy, spec.metric)
    return _nll_grad_from_dist(y, F, theta, d, spec)


def _neighbour_sets(xy: np.ndarray, metric: DistanceMetric, m: int) -> list[np.ndarray]:
    """For each point, the <= m nearest previously ordered points (input order)."""
    n = len(xy)
    nbrs = [np.array([], dtype=np.int64)]
    for i in range(1, n):
        d = pairwise_distances(xy[i : i + 1], xy[:i], metric)[0]
        if i <= m:
            nbrs.append(np.arange(i, dtype=np.int64))
        else:
            # stable argsort then truncate keeps ties at the lowest index
            nbrs.append(np.argsort(d, kind="stable")[:m].astype(np.int64))
    return nbrs


def _batch_dist(a: np.ndarray, b: np.ndarray, metric: DistanceMetric) -> np.ndarray:
    """Distances between stacks of point sets: (k,ma,2) x (k,mb,2) -> (k,ma,mb)."""
    if metric is DistanceMetric.EUCLIDEAN:
        diff = a[:, :, None, :] - b[:, None, :, :]
        return np.sqrt((diff**2).sum(axis=3))
    from .geodata import _haversine_km

    return _haversine_km(
        a[:, :, None, 0], a[:, :, None, 1], b[:, None, :, 0], b[:, None, :, 1]
    )


class _VecchiaWork:
    """Precomputed neighbour geometry, grouped by conditioning-set size."""

    def __init__(self, xy: np.ndarray, metric: DistanceMetric, m: int):
        self.n = len(xy)
        nbrs = _neighbour_sets(xy, metric, m)
        groups = {}
        for i, nb in enumerate(nbrs):
            groups.setdefault(len(nb), []).append(i)
        self.groups = []
        for size, idx in sorted(groups.items()):
            idx = np.asarray(idx, dtype=np.int64)
            if size == 0:
                self.groups.append((idx, None, None, None))
                continue
            nb = np.stack([nbrs[i] for i in idx])
            d_nn = _batch_dist(xy[nb], xy[nb], metric)
            d_in = _batch_dist(xy[idx][:, None, :], xy[nb], metric)[:, 0, :]
            self.groups.append((idx, nb, d_nn, d_in))


def _vecchia_nll_from_work(y, F, theta, cov: CovarianceSpec, work: _VecchiaWork) -> float:
    sigma1_sq, rho, tau_sq = theta
    marg = sigma1_sq + tau_sq
    r = np.asarray(y, dtype=float) - np.asarray(F, dtype=float)
    nll = 0.0
    for idx, nb, d_nn, d_in in work.groups:
        if nb is None:
            nll += (0.5 * r[idx] ** 2 / marg + 0.5 * math.log(marg) + 0.5 * LOG_2PI).sum()
            continue
        size = nb.shape[1]
        C = sigma1_sq * _correlation(cov, rho, d_nn) + tau_sq * np.eye(size)
        c = sigma1_sq * _correlation(cov, rho, d_in)
        sol = np.linalg.solve(C, np.concatenate([c[:, :, None], r[nb][:, :, None]], axis=2))
        ci_sol = sol[:, :, 0]
        mean = (c * sol[:, :, 1]).sum(axis=1)
        var = marg - (c * ci_sol).sum(axis=1)
        if np.any(var <= 0):
            raise NumericalError("non-positive conditional variance in Vecchia term")
        dev = r[idx] - mean
        nll += (0.5 * dev**2 / var + 0.5 * np.log(var) + 0.5 * LOG_2PI).sum()
    return float(nll)


def gp_nll_vecchia(y, F, theta, pts, spec: CovarianceSpec, m_fit: int) -> float:
    """Vecchia NLL: sum of exact Gaussian conditionals on nearest neighbours."""
    xy = pts if isinstance(pts, np.ndarray) else locations_to_array(pts)
    work = _VecchiaWork(xy, spec.metric, m_fit)
    return _vecchia_nll_from_work(y, F, theta, spec, work)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _optimize_theta(objective, theta0, bounds, use_grad: bool):
    x0 = np.log(np.maximum(theta0, THETA_FLOOR))
    res = minimize(
        objective,
        x0,
        jac=True if use_grad else None,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": 100, "gtol": 1e-6, "ftol": 1e-10},
    )
    return np.exp(res.x), res.fun


def fit(records, spec: GpModelSpec, X: np.ndarray = None) -> GpFit:
    """Alternate covariance-parameter optimization with boosting updates.

    X is an optional covariate matrix (one row per record); when given,
    each boosting step fits a regression tree to the generalized residuals
    instead of updating the intercept alone.
    """
    if len(records) < 2:
        raise ValueError("need at least 2 records")
    xy = locations_to_array([r.loc for r in records])
    y = np.array([r.prevalence for r in records])
    n = len(y)
    boost = spec.boosting

    var_y = float(np.var(y))
    tau0 = spec.noise_variance if spec.noise_variance is not None else max(var_y / 2, 1e-6)
    sigma0 = max(var_y / 2, 1e-6)
    d_scale = float(
        np.median(pairwise_distances(xy[: min(n, 200)], xy[: min(n, 200)], spec.cov.metric))
    )
    rho0 = spec.cov.range  # always set: CovarianceSpec derives it from kappa if needed
    theta = np.array([sigma0, rho0, max(tau0, THETA_FLOOR)])

    lo = math.log(THETA_FLOOR)
    bounds = [
        (lo, math.log(max(1e4 * (var_y + 1e-9), 1.0))),
        (lo, math.log(max(1e4 * max(d_scale, 1e-6), 1.0))),
        (lo, math.log(max(1e4 * (var_y + 1e-9), 1.0))),
    ]

    work = _VecchiaWork(xy, spec.cov.metric, spec.vecchia.m_fit) if spec.vecchia else None
    # the covariate boosting step needs the dense solve even under Vecchia
    D = None
    if work is None or X is not None:
        D = pairwise_distances(xy, xy, spec.cov.metric)

    intercept = float(y.mean())
    F = np.full(n, intercept)
    trees = []
    tree_rng = np.random.default_rng(0)

    def nll_at(theta_now, F_now):
        if work is not None:
            return _vecchia_nll_from_work(y, F_now, theta_now, spec.cov, work)
        return _nll_from_dist(y, F_now, theta_now, D, spec.cov)

    trace = [nll_at(theta, F)]
    if not np.isfinite(trace[0]):
        raise FitError("non-finite NLL at initialization", theta=tuple(theta))

    for _ in range(boost.rounds):
        # theta step: quasi-Newton on the (approximate) marginal likelihood
        if work is not None:
            def obj(logt):
                return _vecchia_nll_from_work(y, F, np.exp(logt), spec.cov, work)

            theta_new, fval = _optimize_theta(obj, theta, bounds, use_grad=False)
        else:
            def obj(logt):
                return _nll_grad_from_dist(y, F, np.exp(logt), D, spec.cov)

            theta_new, fval = _optimize_theta(obj, theta, bounds, use_grad=True)
        if not np.isfinite(fval):
            raise FitError(
                "optimizer diverged to non-finite NLL", theta=tuple(theta)
            )
        theta = theta_new

        # boosting step: one update of the fixed effect given theta
        if X is None:
            if work is None:
                L = _chol(_psi_from_dist(D, spec.cov, theta))
                pi_r = cho_solve((L, True), y - F)
                pi_1 = cho_solve((L, True), np.ones(n))
                gamma = float(pi_r.sum() / pi_1.sum())
            else:
                # Vecchia path: weight residuals by the conditional precisions
                gamma = _vecchia_gls_mean(y, F, theta, spec.cov, work)
            intercept += boost.learning_rate * gamma
            F = np.full(n, intercept)
        else:
            psi = _psi_from_dist(D, spec.cov, theta)
            L = _chol(psi)
            pseudo = cho_solve((L, True), y - F)
            params = TreeParams(
                mtry=X.shape[1],
                min_split=2 * boost.min_data_in_leaf,
                min_leaf=boost.min_data_in_leaf,
                max_depth=boost.max_depth,
                max_leaves=boost.num_leaves,
            )
            tree = RegressionTree(params).fit(X, pseudo, tree_rng)
            # replace each leaf mean with its GLS-optimal constant (per-leaf
            # line search); the raw gradient mean has no step-size calibration
            leaf_of = tree.apply(X)
            for leaf in np.unique(leaf_of):
                ind = (leaf_of == leaf).astype(float)
                w = cho_solve((L, True), ind)
                denom = float(ind @ w)
                tree.leaf_mean[leaf] = float(ind @ pseudo) / denom if denom > 0 else 0.0
            trees.append(tree)
            F = F + boost.learning_rate * tree.predict_mean(X)

        current = nll_at(theta, F)
        if not np.isfinite(current):
            raise FitError("non-finite NLL after boosting update", theta=tuple(theta))
        improvement = trace[-1] - current
        trace.append(current)
        if spec.early_stop and improvement < 1e-8:
            break

    return GpFit(
        spec,
        xy,
        y,
        F,
        intercept,
        tuple(float(t) for t in theta),
        np.asarray(trace),
        trees=trees,
    )


def _vecchia_gls_mean(y, F, theta, cov, work: _VecchiaWork) -> float:
    """GLS mean of residuals implied by the Vecchia conditional factorization."""
    r = np.asarray(y, dtype=float) - np.asarray(F, dtype=float)
    sigma1_sq, rho, tau_sq = theta
    marg = sigma1_sq + tau_sq
    num = 0.0
    den = 0.0
    for idx, nb, d_nn, d_in in work.groups:
        if nb is None:
            num += (r[idx] / marg).sum()
            den += len(idx) / marg
            continue
        size = nb.shape[1]
        C = sigma1_sq * _correlation(cov, rho, d_nn) + tau_sq * np.eye(size)
        c = sigma1_sq * _correlation(cov, rho, d_in)
        sol = np.linalg.solve(C, np.concatenate([c[:, :, None], r[nb][:, :, None]], axis=2))
        mean = (c * sol[:, :, 1]).sum(axis=1)
        var = marg - (c * sol[:, :, 0]).sum(axis=1)
        # conditional residual of a constant shift: 1 - c' C^-1 1
        ones = np.ones((len(idx), size, 1))
        sol1 = np.linalg.solve(C, ones)[:, :, 0]
        shift = 1.0 - (c * sol1).sum(axis=1)
        num += (shift * (r[idx] - mean) / var).sum()
        den += (shift**2 / var).sum()
    if den <= 0:
        return 0.0
    return float(num / den)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def predict(fit_result: GpFit, pts, clip: bool = True, X_new: np.ndarray = None):
    """Conditional mean and sd of the response at new locations.

    The reported prevalence mean is clipped to [0, 1] unless clip=False;
    sd is never clipped. With a Vecchia spec, each point conditions on its
    m_predict nearest training points (all of them when m_predict >= n).
    X_new supplies covariates when the model was fitted with trees.
    """
    xy_new = pts if isinstance(pts, np.ndarray) else locations_to_array(pts)
    spec = fit_result.spec
    sigma1_sq, rho, tau_sq = fit_result.theta
    marg = sigma1_sq + tau_sq
    F_new = np.full(len(xy_new), fit_result.intercept)
    if fit_result.trees:
        if X_new is None:
            raise ValueError("model was fitted with covariates; X_new is required")
        lr = spec.boosting.learning_rate
        for tree in fit_result.trees:
            F_new = F_new + lr * tree.predict_mean(X_new)

    n = len(fit_result.y)
    if spec.vecchia is not None:
        m = min(spec.vecchia.m_predict, n)
        resid_all = fit_result.y - fit_result.F_train
        mean = np.empty(len(xy_new))
        var = np.empty(len(xy_new))
        chunk = max(1, int(5e6 / (m * m)))
        for lo in range(0, len(xy_new), chunk):
            hi = min(lo + chunk, len(xy_new))
            d_all = pairwise_distances(xy_new[lo:hi], fit_result.train_xy, spec.cov.metric)
            nb = np.argsort(d_all, axis=1, kind="stable")[:, :m]
            xy_nb = fit_result.train_xy[nb]
            d_nn = _batch_dist(xy_nb, xy_nb, spec.cov.metric)
            d_in = np.take_along_axis(d_all, nb, axis=1)
            C = sigma1_sq * _correlation(spec.cov, rho, d_nn) + tau_sq * np.eye(m)
            c = sigma1_sq * _correlation(spec.cov, rho, d_in)
            rhs = np.concatenate([c[:, :, None], resid_all[nb][:, :, None]], axis=2)
            sol = np.linalg.solve(C, rhs)
            mean[lo:hi] = F_new[lo:hi] + (c * sol[:, :, 1]).sum(axis=1)
            var[lo:hi] = marg - (c * sol[:, :, 0]).sum(axis=1)
    else:
        fit_result._ensure_cache()
        mean = np.empty(len(xy_new))
        var = np.empty(len(xy_new))
        chunk = max(1, int(5e6 / max(n, 1)))
        for lo in range(0, len(xy_new), chunk):
            hi = min(lo + chunk, len(xy_new))
            d_cross = pairwise_distances(fit_result.train_xy, xy_new[lo:hi], spec.cov.metric)
            K = sigma1_sq * _correlation(spec.cov, rho, d_cross)
            mean[lo:hi] = F_new[lo:hi] + K.T @ fit_result._alpha
            V = solve_triangular(fit_result._chol, K, lower=True)
            var[lo:hi] = marg - (V**2).sum(axis=0)

    sd = np.sqrt(np.maximum(var, 0.0))
    if clip:
        mean = np.clip(mean, 0.0, 1.0)
    return mean, sd
