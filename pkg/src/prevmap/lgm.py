"""Latent Gaussian Markov random field on a regular lattice.

The spatial field is a lattice GMRF from the stochastic-PDE construction
at smoothness order alpha=2 (Matern smoothness 1 in two dimensions):
Q = tau * (kappa^2 C + G) C^-1 (kappa^2 C + G) with C the diagonal of
cell areas and G the 5-point Laplacian stiffness. Observations attach to
the field by bilinear interpolation; an intercept rides along as one
extra latent dimension with vague precision.

Inference is empirical Bayes: an inner Newton finds the latent mode given
hyperparameters, a Laplace approximation scores the hyperparameter
posterior, and an outer quasi-Newton maximizes it. Hyperparameters are
optimized as (log kappa, log field variance) with tau derived through the
stationary relation var = 1/(4 pi kappa^2 tau); responses are binomial,
Beta-binomial (overdispersion phi), or Gaussian on the raw proportion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.sparse.linalg import splu
from scipy.special import expit

from .errors import BoundsError, FitError
from .responses import betabinomial_parts, binomial_parts, gaussian_parts
from .geodata import Location, locations_to_array, records_bbox

BETA0_PRECISION = 1e-6
INNER_TOL = 1e-8
INNER_MAXIT = 100

_GH_NODES, _GH_WEIGHTS = None, None


def _gauss_hermite(n=512):
    global _GH_NODES, _GH_WEIGHTS
    if _GH_NODES is None:
        from scipy.special import roots_hermitenorm

        x, w = roots_hermitenorm(n)
        _GH_NODES, _GH_WEIGHTS = x, w / math.sqrt(2.0 * math.pi)
    return _GH_NODES, _GH_WEIGHTS


class ResponseKind:
    BINOMIAL = "binomial"
    BETABINOMIAL = "betabinomial"
    GAUSSIAN = "gaussian"

    ALL = (BINOMIAL, BETABINOMIAL, GAUSSIAN)


@dataclass
class LgmSpec:
    lattice_cell: float = 0.5
    margin: float = 2.0
    alpha: int = 2
    response: str = ResponseKind.BINOMIAL
    kappa_bounds: tuple = (1e-3, 1e3)
    variance_bounds: tuple = (1e-6, 1e6)  # field variance box
    phi_bounds: tuple = (1e-3, 1e6)  # Beta-binomial overdispersion box
    noise_bounds: tuple = (1e-10, 1e2)  # Gaussian response variance box

    def __post_init__(self):
        if self.alpha != 2:
            raise ValueError("only alpha = 2 is supported")
        if self.lattice_cell <= 0:
            raise ValueError("lattice_cell must be positive")
        if self.response not in ResponseKind.ALL:
            raise ValueError(f"unknown response {self.response!r}")

    def effective_kappa_bounds(self) -> tuple:
        """User box clamped to what the lattice can support.

        The margin must cover the longest admissible range (kappa >= 2/margin)
        and the lattice cannot resolve ranges below its own spacing
        (kappa <= 2/lattice_cell, a practical-range floor of ~1.4 cells).
        """
        lo = max(self.kappa_bounds[0], 2.0 / self.margin)
        hi = min(self.kappa_bounds[1], 2.0 / self.lattice_cell)
        return (lo, hi)

    @classmethod
    def from_json(cls, d: dict) -> "LgmSpec":
        return cls(
            lattice_cell=float(d.get("lattice_cell", 0.5)),
            margin=float(d.get("margin", 2.0)),
            alpha=int(d.get("alpha", 2)),
            response=str(d.get("response", "binomial")).lower(),
        )


@dataclass
class Lattice:
    """Regular grid of GMRF nodes; node (i, j) sits at origin + (j, i) * cell."""

    origin: Location
    cell: float
    n_y: int
    n_x: int

    @property
    def n_nodes(self) -> int:
        return self.n_y * self.n_x

    def node_xy(self) -> np.ndarray:
        lon = self.origin.lon + np.arange(self.n_x) * self.cell
        lat = self.origin.lat + np.arange(self.n_y) * self.cell
        gx, gy = np.meshgrid(lon, lat)
        return np.column_stack([gx.ravel(), gy.ravel()])


def build_lattice(bbox, cell: float, margin: float) -> Lattice:
    sw, ne = bbox
    lon0, lat0 = sw.lon - margin, sw.lat - margin
    span_x = (ne.lon - sw.lon) + 2 * margin
    span_y = (ne.lat - sw.lat) + 2 * margin
    if span_x <= 0 or span_y <= 0:
        raise ValueError("degenerate lattice bbox")
    n_x = max(3, math.ceil(span_x / cell) + 1)
    n_y = max(3, math.ceil(span_y / cell) + 1)
    return Lattice(Location(lon0, lat0), cell, n_y, n_x)


def build_precision(lattice: Lattice, kappa: float, tau_field: float) -> sp.csr_matrix:
    """SPDE alpha=2 precision: tau * (kappa^2 C + G) C^-1 (kappa^2 C + G)."""
    if kappa <= 0 or tau_field <= 0:
        raise ValueError("kappa and tau_field must be positive")
    if lattice.n_x < 3 or lattice.n_y < 3:
        raise ValueError("lattice must be at least 3x3")
    h = lattice.cell

    def path_laplacian(n):
        main = np.full(n, 2.0)
        main[0] = main[-1] = 1.0
        return sp.diags([main, -np.ones(n - 1), -np.ones(n - 1)], [0, -1, 1])

    G = sp.kronsum(path_laplacian(lattice.n_x), path_laplacian(lattice.n_y)).tocsr()
    c = h * h
    K = (kappa**2 * c) * sp.eye(lattice.n_nodes, format="csr") + G
    Q = tau_field * (K @ K) / c
    return Q.tocsr()


def tau_from_variance(kappa: float, variance: float) -> float:
    """Stationary Matern-1 relation: variance = 1 / (4 pi kappa^2 tau)."""
    return 1.0 / (4.0 * math.pi * kappa**2 * variance)


def interp_matrix(lattice: Lattice, pts) -> sp.csr_matrix:
    """Bilinear interpolation weights from lattice nodes to points."""
    xy = pts if isinstance(pts, np.ndarray) else locations_to_array(pts)
    fx = (xy[:, 0] - lattice.origin.lon) / lattice.cell
    fy = (xy[:, 1] - lattice.origin.lat) / lattice.cell
    eps = 1e-9
    if np.any(fx < -eps) or np.any(fx > lattice.n_x - 1 + eps) or np.any(
        fy < -eps
    ) or np.any(fy > lattice.n_y - 1 + eps):
        bad = np.flatnonzero(
            (fx < -eps) | (fx > lattice.n_x - 1 + eps) | (fy < -eps) | (fy > lattice.n_y - 1 + eps)
        )
        raise BoundsError(f"{len(bad)} point(s) outside lattice hull (first index {bad[0]})")
    ix = np.clip(np.floor(fx).astype(int), 0, lattice.n_x - 2)
    iy = np.clip(np.floor(fy).astype(int), 0, lattice.n_y - 2)
    wx = np.clip(fx - ix, 0.0, 1.0)
    wy = np.clip(fy - iy, 0.0, 1.0)
    n = len(xy)
    rows = np.repeat(np.arange(n), 4)
    cols = np.concatenate(
        [
            iy * lattice.n_x + ix,
            iy * lattice.n_x + ix + 1,
            (iy + 1) * lattice.n_x + ix,
            (iy + 1) * lattice.n_x + ix + 1,
        ]
    ).reshape(4, n).T.ravel()
    vals = np.column_stack(
        [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy]
    ).ravel()
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, lattice.n_nodes))
    return A


class LgmFit:
    def __init__(self, spec, lattice, theta_hat, latent_mode, q_post, beta0, log_marginal, a_obs):
        self.spec = spec
        self.lattice = lattice
        self.theta_hat = theta_hat  # dict: kappa, tau_field, field_variance, extra
        self.latent_mode = latent_mode  # nodes then beta0
        self.q_post = q_post  # sparse precision of the Gaussian approximation
        self.beta0 = beta0
        self.log_marginal = log_marginal
        self._a_obs = a_obs
        self._factor = None

    def _solve_qpost(self, rhs: np.ndarray) -> np.ndarray:
        if self._factor is None:
            self._factor = splu(self.q_post.tocsc())
        return self._factor.solve(rhs)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_factor"] = None  # SuperLU objects do not pickle
        return state


def _inner_mode(Q_prior, A, parts_fn, data1, data2, extra, u0):
    """Newton ascent of loglik(A u) - 0.5 u' Q u; returns mode and pieces."""
    u = u0.copy()
    AT = A.T.tocsr()

    def objective(u_vec):
        ll, _, _ = parts_fn(A @ u_vec, data1, data2, extra)
        return ll - 0.5 * float(u_vec @ (Q_prior @ u_vec))

    for it in range(INNER_MAXIT):
        zeta = A @ u
        ll, grad_obs, W = parts_fn(zeta, data1, data2, extra)
        grad = AT @ grad_obs - Q_prior @ u
        gnorm = float(np.abs(grad).max())
        if gnorm < INNER_TOL:
            break
        H = (Q_prior + AT @ sp.diags(W) @ A).tocsc()
        # roundoff floor: gradients below eps * ||H|| * ||u|| are noise
        floor = 100 * np.finfo(float).eps * float(H.diagonal().max()) * max(
            1.0, float(np.abs(u).max())
        )
        if gnorm < floor:
            break
        step = splu(H).solve(grad)
        f0 = ll - 0.5 * float(u @ (Q_prior @ u))
        # Newton decrement below objective roundoff: converged in float64
        if 0.5 * float(grad @ step) < 100 * np.finfo(float).eps * (1.0 + abs(f0)):
            break
        # backtracking keeps the ascent monotone when curvature was clipped
        t = 1.0
        improved = False
        while t > 1e-6:
            cand = u + t * step
            if objective(cand) > f0 - 1e-12:
                improved = True
                break
            t *= 0.5
        if not improved:
            break  # numerical precision floor reached
        u = u + t * step
    else:
        raise FitError(
            f"inner Newton did not converge in {INNER_MAXIT} iterations",
            grad_norm=gnorm,
        )
    zeta = A @ u
    ll, _, W = parts_fn(zeta, data1, data2, extra)
    q_post = (Q_prior + AT @ sp.diags(W) @ A).tocsc()
    return u, ll, q_post


def _logdet_sparse(M: sp.spmatrix) -> float:
    lu = splu(M.tocsc())
    return float(np.log(np.abs(lu.U.diagonal())).sum())


def fit(records, spec: LgmSpec, bbox=None) -> LgmFit:
    """Empirical-Bayes fit: maximize the Laplace-approximated evidence.

    bbox optionally widens the lattice beyond the data bounding box (used
    by cross-validation so every held-out point stays inside the hull).
    """
    if len(records) < 2:
        raise ValueError("need at least 2 records")
    data_bbox = records_bbox(records)
    if bbox is not None:
        data_bbox = (
            Location(min(bbox[0].lon, data_bbox[0].lon), min(bbox[0].lat, data_bbox[0].lat)),
            Location(max(bbox[1].lon, data_bbox[1].lon), max(bbox[1].lat, data_bbox[1].lat)),
        )
    lattice = build_lattice(data_bbox, spec.lattice_cell, spec.margin)
    locs = [r.loc for r in records]
    A_field = interp_matrix(lattice, locs)
    ones = sp.csr_matrix(np.ones((len(records), 1)))
    A = sp.hstack([A_field, ones], format="csr")
    n_latent = lattice.n_nodes + 1

    H = np.array([r.positive for r in records], dtype=float)
    N = np.array([r.examined for r in records], dtype=float)
    yprop = H / N

    if spec.response == ResponseKind.BINOMIAL:
        parts_fn, d1, d2 = binomial_parts, H, N
    elif spec.response == ResponseKind.BETABINOMIAL:
        parts_fn, d1, d2 = betabinomial_parts, H, N
    else:
        parts_fn, d1, d2 = gaussian_parts, yprop, None

    kb = spec.effective_kappa_bounds()
    vb = spec.variance_bounds
    span = max(
        data_bbox[1].lon - data_bbox[0].lon, data_bbox[1].lat - data_bbox[0].lat
    )

    state = {"u": np.zeros(n_latent)}

    def neg_log_evidence(x):
        kappa = math.exp(x[0])
        variance = math.exp(x[1])
        extra = math.exp(x[2]) if len(x) > 2 else None
        tau = tau_from_variance(kappa, variance)
        Q_field = build_precision(lattice, kappa, tau)
        Q_prior = sp.block_diag(
            [Q_field, sp.csr_matrix([[BETA0_PRECISION]])], format="csr"
        )
        u, ll, q_post = _inner_mode(Q_prior, A, parts_fn, d1, d2, extra, state["u"])
        state["u"] = u
        logdet_prior = _logdet_sparse(Q_field) + math.log(BETA0_PRECISION)
        log_ev = (
            ll
            - 0.5 * float(u @ (Q_prior @ u))
            + 0.5 * logdet_prior
            - 0.5 * _logdet_sparse(q_post)
        )
        return -log_ev

    bounds = [
        (math.log(kb[0]), math.log(kb[1])),
        (math.log(vb[0]), math.log(vb[1])),
    ]
    if spec.response == ResponseKind.BETABINOMIAL:
        bounds.append((math.log(spec.phi_bounds[0]), math.log(spec.phi_bounds[1])))
        extra0 = [math.log(10.0)]
    elif spec.response == ResponseKind.GAUSSIAN:
        bounds.append((math.log(spec.noise_bounds[0]), math.log(spec.noise_bounds[1])))
        extra0 = [math.log(max(float(np.var(yprop)) / 2, 1e-6))]
    else:
        extra0 = []

    # two deterministic starts: a long and a short initial range
    starts = []
    for frac in (0.4, 0.08):
        k0 = min(max(math.sqrt(8.0) / max(frac * span, 1e-6), kb[0] * 1.01), kb[1] * 0.99)
        starts.append(np.array([math.log(k0), math.log(1.0)] + extra0))

    best = None
    for x0 in starts:
        state["u"] = np.zeros(n_latent)
        res = minimize(
            neg_log_evidence,
            x0,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": 60, "ftol": 1e-9},
        )
        if best is None or res.fun < best.fun:
            best = res
    x = best.x
    # hitting the user's kappa prior box is an error; the margin-derived
    # floor max(kappa_lo, 2/margin) is a documented clamp, and variance-type
    # parameters may legitimately collapse to a box edge
    if x[0] <= math.log(spec.kappa_bounds[0]) + 1e-9:
        raise FitError(
            f"empirical-Bayes mode sits on the kappa prior lower bound {spec.kappa_bounds[0]:.3g}",
            param="kappa",
            value=math.exp(x[0]),
        )
    if x[0] >= math.log(spec.kappa_bounds[1]) - 1e-9:
        raise FitError(
            f"empirical-Bayes mode sits on the kappa prior upper bound {spec.kappa_bounds[1]:.3g}",
            param="kappa",
            value=math.exp(x[0]),
        )

    kappa = math.exp(x[0])
    variance = math.exp(x[1])
    extra = math.exp(x[2]) if len(x) > 2 else None
    tau = tau_from_variance(kappa, variance)
    Q_field = build_precision(lattice, kappa, tau)
    Q_prior = sp.block_diag([Q_field, sp.csr_matrix([[BETA0_PRECISION]])], format="csr")
    state["u"] = np.zeros(n_latent)
    u, ll, q_post = _inner_mode(Q_prior, A, parts_fn, d1, d2, extra, state["u"])
    logdet_prior = _logdet_sparse(Q_field) + math.log(BETA0_PRECISION)
    log_marginal = (
        ll
        - 0.5 * float(u @ (Q_prior @ u))
        + 0.5 * logdet_prior
        - 0.5 * _logdet_sparse(q_post)
    )
    theta_hat = {
        "kappa": kappa,
        "field_variance": variance,
        "tau_field": tau,
    }
    if spec.response == ResponseKind.BETABINOMIAL:
        theta_hat["phi"] = extra
    elif spec.response == ResponseKind.GAUSSIAN:
        theta_hat["noise_variance"] = extra
    return LgmFit(spec, lattice, theta_hat, u, q_post, float(u[-1]), float(log_marginal), A)


def _latent_at(fit_result: LgmFit, pts):
    lattice = fit_result.lattice
    A_field = interp_matrix(lattice, pts)
    n = A_field.shape[0]
    A = sp.hstack([A_field, sp.csr_matrix(np.ones((n, 1)))], format="csr")
    mean = A @ fit_result.latent_mode
    var = np.empty(n)
    chunk = max(1, int(2e7 / max(fit_result.q_post.shape[0], 1)))
    At = A.T.toarray()
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        sol = fit_result._solve_qpost(At[:, lo:hi])
        var[lo:hi] = (At[:, lo:hi] * sol).sum(axis=0)
    return mean, np.maximum(var, 0.0)


def link_moments(mean_lat, sd_lat):
    """E[expit(z)] and E[expit(z)^2] for z ~ N(mean, sd^2), via 512-point
    Gauss-Hermite quadrature."""
    mean_lat = np.atleast_1d(np.asarray(mean_lat, dtype=float))
    sd_lat = np.atleast_1d(np.asarray(sd_lat, dtype=float))
    nodes, weights = _gauss_hermite()
    z = mean_lat[:, None] + sd_lat[:, None] * nodes[None, :]
    p = expit(z)
    return p @ weights, (p * p) @ weights


def predict(fit_result: LgmFit, pts) -> dict:
    """Median, mean, and sd of prevalence at points inside the lattice hull.

    Moments integrate the latent Gaussian through the link with 512-point
    Gauss-Hermite quadrature; the sd adds response-level variance for the
    Beta-binomial (beta noise) and Gaussian (observation noise) responses.
    """
    mean_lat, var_lat = _latent_at(fit_result, pts)
    sd_lat = np.sqrt(var_lat)
    response = fit_result.spec.response
    if response == ResponseKind.GAUSSIAN:
        noise = fit_result.theta_hat["noise_variance"]
        est = np.clip(mean_lat, 0.0, 1.0)
        return {
            "median": est,
            "mean": est,
            "sd": np.sqrt(var_lat + noise),
        }
    ep, ep2 = link_moments(mean_lat, sd_lat)
    var_p = np.maximum(ep2 - ep**2, 0.0)
    if response == ResponseKind.BETABINOMIAL:
        phi = fit_result.theta_hat["phi"]
        var_p = var_p + np.maximum(ep - ep2, 0.0) / (1.0 + phi)
    return {
        "median": expit(mean_lat),
        "mean": ep,
        "sd": np.sqrt(var_p),
    }


def range_diagnostic(fit_result: LgmFit) -> dict:
    """Practical range sqrt(8)/kappa (smoothness 1) and stationary field variance."""
    kappa = fit_result.theta_hat["kappa"]
    tau = fit_result.theta_hat["tau_field"]
    return {
        "practical_range": math.sqrt(8.0) / kappa,
        "field_variance": 1.0 / (4.0 * math.pi * kappa**2 * tau),
    }
