"""Fixed-rank kriging on basic areal units (BAUs).

The latent prevalence surface over BAU centroids is
logit(p'_j) = beta0 + sum_l phi_l(x_j) eta_l + xi_j, with Gaussian bump
basis functions phi laid regularly in nres resolutions, random
coefficients eta carrying a per-resolution CAR-family precision
tau_k * (rho_k (D - W) + (1 - rho_k) I) on the basis-centre grid graph,
and an uncorrelated fine-scale effect xi. Binomial observations attach
to BAUs through a one-hot incidence matrix. Hyperparameters (beta0,
per-resolution tau/rho, fine-scale variance) maximize a
Laplace-approximated marginal likelihood via quasi-Newton; prediction
draws Monte Carlo samples from the Gaussian approximation at the mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import expit

from .errors import BoundsError, FitError, NumericalError
from .geodata import Location, Raster, build_grid, locations_to_array
from .responses import binomial_parts, gaussian_parts
from .util import parallel_map

INNER_TOL = 1e-8
INNER_MAXIT = 100
BETA0_BOX = (-15.0, 15.0)


@dataclass
class BasisSet:
    """Multi-resolution Gaussian bumps: centres, apertures, resolution ids."""

    centres: np.ndarray  # (r, 2) lon/lat
    apertures: np.ndarray  # (r,)
    resolution_id: np.ndarray  # (r,) 1-based
    grid_shapes: list  # per resolution (n_lon, n_lat) of the centre grid
    nres: int
    regular: int
    scale_aperture: float

    @property
    def size(self) -> int:
        return len(self.centres)


def place_basis(bbox, nres: int = 2, regular: int = 1, scale_aperture: float = 1.25) -> BasisSet:
    """Lay Gaussian basis functions regularly over the (expanded) domain.

    Resolution k uses 3 * 2^(k-1) * regular functions along the short side
    of the bbox (the long side count scales with the aspect ratio), with
    aperture = scale_aperture * (short-side span / short-side count) and
    centres spread over the bbox expanded by one aperture on each side.
    """
    if nres < 1 or regular < 1:
        raise ValueError("nres and regular must be >= 1")
    sw, ne = bbox
    span_x = ne.lon - sw.lon
    span_y = ne.lat - sw.lat
    if span_x <= 0 or span_y <= 0:
        raise ValueError("degenerate bbox for basis placement")
    span_short = min(span_x, span_y)
    centres = []
    apertures = []
    res_ids = []
    shapes = []
    for k in range(1, nres + 1):
        count_short = 3 * 2 ** (k - 1) * regular
        n_x = count_short if span_x <= span_y else max(count_short, round(count_short * span_x / span_y))
        n_y = count_short if span_y < span_x else max(count_short, round(count_short * span_y / span_x))
        spacing = span_short / count_short
        aperture = scale_aperture * spacing
        lon = np.linspace(sw.lon - aperture, ne.lon + aperture, n_x)
        lat = np.linspace(sw.lat - aperture, ne.lat + aperture, n_y)
        gx, gy = np.meshgrid(lon, lat)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        centres.append(pts)
        apertures.append(np.full(len(pts), aperture))
        res_ids.append(np.full(len(pts), k, dtype=int))
        shapes.append((n_x, n_y))
    return BasisSet(
        centres=np.vstack(centres),
        apertures=np.concatenate(apertures),
        resolution_id=np.concatenate(res_ids),
        grid_shapes=shapes,
        nres=nres,
        regular=regular,
        scale_aperture=scale_aperture,
    )


def basis_eval(basis: BasisSet, pts) -> np.ndarray:
    """Evaluate all bumps at points: Phi[i, l] = exp(-d_il^2 / (2 a_l^2))."""
    xy = pts if isinstance(pts, np.ndarray) else locations_to_array(pts)
    diff = xy[:, None, :] - basis.centres[None, :, :]
    d2 = (diff**2).sum(axis=2)
    return np.exp(-0.5 * d2 / basis.apertures[None, :] ** 2)


class BauGrid:
    """Raster-shaped partition of the domain into basic areal units."""

    def __init__(self, grid: Raster):
        self.grid = grid
        self.n_baus = grid.n_rows * grid.n_cols

    @classmethod
    def over_bbox(cls, bbox, cell_size: float) -> "BauGrid":
        sw, ne = bbox
        # pad so points on the far edges still land inside a half-open cell
        eps = 1e-9 * max(1.0, abs(ne.lon), abs(ne.lat))
        return cls(build_grid((sw, Location(ne.lon + eps, ne.lat + eps)), cell_size))

    def bau_index(self, locs) -> np.ndarray:
        """Row-major BAU index of each location; raises BoundsError outside."""
        out = np.empty(len(locs), dtype=np.int64)
        for i, loc in enumerate(locs):
            row, col = self.grid.cell_of(loc)
            out[i] = row * self.grid.n_cols + col
        return out

    def centroids_xy(self) -> np.ndarray:
        g = self.grid
        lon = g.origin.lon + (np.arange(g.n_cols) + 0.5) * g.cell_size
        lat = g.origin.lat + (np.arange(g.n_rows) + 0.5) * g.cell_size
        gx, gy = np.meshgrid(lon, lat)
        return np.column_stack([gx.ravel(), gy.ravel()])


def car_precision(n_x: int, n_y: int, tau: float, rho: float) -> np.ndarray:
    """CAR-family precision tau * (rho (D - W) + (1 - rho) I) on a grid graph."""
    n = n_x * n_y
    W = np.zeros((n, n))
    for j in range(n_y):
        for i in range(n_x):
            a = j * n_x + i
            if i + 1 < n_x:
                W[a, a + 1] = W[a + 1, a] = 1.0
            if j + 1 < n_y:
                W[a, a + n_x] = W[a + n_x, a] = 1.0
    D = np.diag(W.sum(axis=1))
    return tau * (rho * (D - W) + (1.0 - rho) * np.eye(n))


class FrkFit:
    def __init__(self, basis, bau, beta0, eta_mode, xi_mode, k_params, sigma2_xi,
                 chol_post, data_bau_idx, response, noise_variance, log_marginal):
        self.basis = basis
        self.bau = bau
        self.beta0 = beta0
        self.eta_mode = eta_mode
        self.xi_mode = xi_mode  # fine-scale effects at the data BAUs
        self.k_params = k_params  # per resolution (tau, rho)
        self.sigma2_xi = sigma2_xi
        self.chol_post = chol_post  # lower Cholesky of the Laplace precision
        self.data_bau_idx = data_bau_idx  # sorted unique BAUs containing data
        self.response = response
        self.noise_variance = noise_variance
        self.log_marginal = log_marginal


def _prior_precision(basis: BasisSet, k_params, sigma2_xi, n_xi) -> np.ndarray:
    blocks = []
    for k, (n_x, n_y) in enumerate(basis.grid_shapes, start=1):
        tau, rho = k_params[k - 1]
        blocks.append(car_precision(n_x, n_y, tau, rho))
    r = basis.size
    dim = r + n_xi
    Q = np.zeros((dim, dim))
    at = 0
    for B in blocks:
        m = len(B)
        Q[at : at + m, at : at + m] = B
        at += m
    Q[r:, r:] = np.eye(n_xi) / sigma2_xi
    return Q


def _inner_mode(Q_prior, A, parts_fn, d1, d2, extra, offset, u0):
    """Newton for the latent mode of loglik(offset + A u) - 0.5 u'Qu."""
    u = u0.copy()

    def objective(u_vec):
        ll, _, _ = parts_fn(offset + A @ u_vec, d1, d2, extra)
        return ll - 0.5 * float(u_vec @ (Q_prior @ u_vec))

    gnorm = np.inf
    for _ in range(INNER_MAXIT):
        zeta = offset + A @ u
        ll, grad_obs, W = parts_fn(zeta, d1, d2, extra)
        grad = A.T @ grad_obs - Q_prior @ u
        gnorm = float(np.abs(grad).max())
        if gnorm < INNER_TOL:
            break
        Hmat = Q_prior + (A.T * W) @ A
        # roundoff floor: gradients below eps * ||H|| * ||u|| are noise
        floor = 100 * np.finfo(float).eps * float(Hmat.diagonal().max()) * max(
            1.0, float(np.abs(u).max())
        )
        if gnorm < floor:
            break
        try:
            L = np.linalg.cholesky(Hmat)
        except np.linalg.LinAlgError:
            raise NumericalError("Laplace Hessian not positive definite")
        step = cho_solve((L, True), grad)
        f0 = ll - 0.5 * float(u @ (Q_prior @ u))
        # Newton decrement below objective roundoff: converged in float64
        if 0.5 * float(grad @ step) < 100 * np.finfo(float).eps * (1.0 + abs(f0)):
            break
        t = 1.0
        improved = False
        while t > 1e-6:
            if objective(u + t * step) > f0 - 1e-12:
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
    zeta = offset + A @ u
    ll, _, W = parts_fn(zeta, d1, d2, extra)
    q_post = Q_prior + (A.T * W) @ A
    return u, ll, q_post


def _logdet_psd(M: np.ndarray) -> float:
    L = np.linalg.cholesky(M)
    return 2.0 * float(np.log(np.diag(L)).sum())


def fit(records, bau_cell_size: float, basis: BasisSet, bbox=None,
        response: str = "binomial", noise_variance: float = None) -> FrkFit:
    """Maximize the Laplace-approximated marginal likelihood.

    The BAU grid spans the data bounding box (or `bbox` when given, e.g.
    the full-survey box during cross-validation). `response` is binomial
    for prevalence counts or gaussian (on H/N, used by the exactness
    tests and available generally); the gaussian noise variance is
    estimated unless `noise_variance` pins it.
    """
    if len(records) < 2:
        raise ValueError("need at least 2 records")
    locs = [r.loc for r in records]
    if bbox is None:
        from .geodata import records_bbox

        bbox = records_bbox(records)
    bau = BauGrid.over_bbox(bbox, bau_cell_size)
    obs_bau = bau.bau_index(locs)
    data_bau_idx = np.unique(obs_bau)
    n_xi = len(data_bau_idx)
    bau_pos = {b: i for i, b in enumerate(data_bau_idx)}

    centroids = bau.centroids_xy()
    phi_data = basis_eval(basis, centroids[data_bau_idx])
    # observation design in (eta, xi): each obs reads its BAU's row
    obs_row = np.array([bau_pos[b] for b in obs_bau])
    E = np.zeros((len(records), n_xi))
    E[np.arange(len(records)), obs_row] = 1.0
    A = np.hstack([phi_data[obs_row], E])

    H = np.array([r.positive for r in records], dtype=float)
    N = np.array([r.examined for r in records], dtype=float)
    if response == "binomial":
        parts_fn, d1, d2 = binomial_parts, H, N
        fixed_extra = None
    elif response == "gaussian":
        parts_fn, d1, d2 = gaussian_parts, H / N, None
        fixed_extra = noise_variance
    else:
        raise ValueError(f"unknown response {response!r}")

    r = basis.size
    dim = r + n_xi
    nres = basis.nres

    state = {"u": np.zeros(dim)}

    def unpack(x):
        beta0 = x[0]
        k_params = []
        for k in range(nres):
            k_params.append((math.exp(x[1 + 2 * k]), expit(x[2 + 2 * k])))
        sigma2_xi = math.exp(x[1 + 2 * nres])
        extra = fixed_extra
        if response == "gaussian" and noise_variance is None:
            extra = math.exp(x[2 + 2 * nres])
        return beta0, k_params, sigma2_xi, extra

    def neg_log_evidence(x):
        beta0, k_params, sigma2_xi, extra = unpack(x)
        Q_prior = _prior_precision(basis, k_params, sigma2_xi, n_xi)
        u, ll, q_post = _inner_mode(
            Q_prior, A, parts_fn, d1, d2, extra, np.full(len(records), beta0), state["u"]
        )
        state["u"] = u
        log_ev = (
            ll
            - 0.5 * float(u @ (Q_prior @ u))
            + 0.5 * _logdet_psd(Q_prior)
            - 0.5 * _logdet_psd(q_post)
        )
        return -log_ev

    # start: empirical logit of the pooled prevalence
    pooled = (H.sum() + 0.5) / (N.sum() + 1.0)
    x0 = [math.log(pooled / (1 - pooled))]
    for _ in range(nres):
        x0 += [0.0, 0.0]  # tau = 1, rho = 0.5
    x0.append(math.log(0.25))
    bounds = [BETA0_BOX]
    for _ in range(nres):
        bounds += [(math.log(1e-6), math.log(1e6)), (-12.0, 12.0)]
    bounds.append((math.log(1e-8), math.log(1e2)))
    if response == "gaussian" and noise_variance is None:
        x0.append(math.log(max(float(np.var(H / N)) / 2, 1e-6)))
        bounds.append((math.log(1e-10), math.log(1e2)))
    x0 = np.array(x0)

    res = minimize(
        neg_log_evidence,
        x0,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": 80, "ftol": 1e-9},
    )
    beta0, k_params, sigma2_xi, extra = unpack(res.x)
    Q_prior = _prior_precision(basis, k_params, sigma2_xi, n_xi)
    state["u"] = np.zeros(dim)
    u, ll, q_post = _inner_mode(
        Q_prior, A, parts_fn, d1, d2, extra, np.full(len(records), beta0), state["u"]
    )
    log_marginal = (
        ll
        - 0.5 * float(u @ (Q_prior @ u))
        + 0.5 * _logdet_psd(Q_prior)
        - 0.5 * _logdet_psd(q_post)
    )
    return FrkFit(
        basis=basis,
        bau=bau,
        beta0=float(beta0),
        eta_mode=u[:r].copy(),
        xi_mode=u[r:].copy(),
        k_params=k_params,
        sigma2_xi=float(sigma2_xi),
        chol_post=np.linalg.cholesky(q_post),
        data_bau_idx=data_bau_idx,
        response=response,
        noise_variance=extra,
        log_marginal=float(log_marginal),
    )


def predict(fit_result: FrkFit, n_mc: int = 400, seed: int = 0,
            laplace_scale: float = 1.0, threads: int = 1):
    """Monte Carlo prediction over every BAU: mean and sd of prevalence p.

    Draws (eta, xi at data BAUs) from the Laplace Gaussian at the mode and
    fine-scale effects at all other BAUs from N(0, sigma2_xi); transforms
    through the inverse link. laplace_scale=0 collapses the samples onto
    the mode (test hook). Sample chunks own spawned seed streams, so the
    result is identical for any `threads`.
    """
    basis = fit_result.basis
    bau = fit_result.bau
    M = bau.n_baus
    centroids = bau.centroids_xy()
    phi_all = basis_eval(basis, centroids)
    r = basis.size
    n_xi = len(fit_result.data_bau_idx)
    mode = np.concatenate([fit_result.eta_mode, fit_result.xi_mode])
    sigma_xi = math.sqrt(fit_result.sigma2_xi)
    is_data_bau = np.zeros(M, dtype=bool)
    is_data_bau[fit_result.data_bau_idx] = True
    xi_col = np.zeros(M, dtype=np.int64)
    xi_col[fit_result.data_bau_idx] = np.arange(n_xi)

    chunk = max(1, min(n_mc, int(2e7 / max(M, 1))))
    starts = list(range(0, n_mc, chunk))
    seeds = np.random.SeedSequence(seed).spawn(len(starts))

    def run_chunk(args):
        lo, ss = args
        k = min(chunk, n_mc - lo)
        rng = np.random.default_rng(ss)
        z = rng.standard_normal((r + n_xi, k))
        devs = solve_triangular(fit_result.chol_post.T, z, lower=False)
        u = mode[:, None] + laplace_scale * devs
        zeta = fit_result.beta0 + phi_all @ u[:r]  # (M, k)
        zeta[is_data_bau] += u[r:][xi_col[is_data_bau]]
        xi_free = rng.standard_normal((int((~is_data_bau).sum()), k))
        zeta[~is_data_bau] += laplace_scale * sigma_xi * xi_free
        p = expit(zeta)
        return p.sum(axis=1), (p**2).sum(axis=1)

    sums = parallel_map(run_chunk, list(zip(starts, seeds)), threads=threads)
    s1 = np.sum([s[0] for s in sums], axis=0)
    s2 = np.sum([s[1] for s in sums], axis=0)
    mean = s1 / n_mc
    if laplace_scale == 0.0 or n_mc < 2:
        sd = np.zeros(M)
    else:
        var = np.maximum((s2 - n_mc * mean**2) / (n_mc - 1), 0.0)
        sd = np.sqrt(var)
    return mean, sd


def predict_at(fit_result: FrkFit, locs, n_mc: int = 400, seed: int = 0, threads: int = 1):
    """BAU-level predictions looked up at point locations."""
    mean, sd = predict(fit_result, n_mc=n_mc, seed=seed, threads=threads)
    idx = fit_result.bau.bau_index(locs)
    return mean[idx], sd[idx]
