"""Stationary isotropic covariance functions.

Families: exponential `s2*exp(-u/rho)`, squared exponential
`s2*exp(-u^2/(2*rho^2))`, and Matern
`s2 * 2^(1-lam)/Gamma(lam) * (kappa*u)^lam * K_lam(kappa*u)`
with the u -> 0 limit taken analytically. Matern accepts either the decay
`kappa` or the range `rho` (stored as kappa = 1/rho); half-integer
smoothness 1/2, 3/2, 5/2 uses closed forms, anything else the general
Bessel-K routine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import gammaln, kv

from .errors import NumericalError
from .geodata import DistanceMetric, distance_matrix


class CovFamily(Enum):
    MATERN = "matern"
    EXPONENTIAL = "exponential"
    SQUARED_EXPONENTIAL = "squaredexponential"

    @classmethod
    def from_string(cls, s: str) -> "CovFamily":
        key = s.strip().lower().replace("_", "").replace("-", "")
        for f in cls:
            if f.value == key:
                return f
        raise ValueError(f"unknown covariance family {s!r}")


_HALF_INTEGER = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class CovarianceSpec:
    family: CovFamily
    variance: float
    range: float = None  # rho; for Matern may be given instead of kappa
    kappa: float = None  # Matern decay; kappa = 1/rho
    smoothness: float = None  # Matern lambda
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("variance must be > 0")
        if self.family is CovFamily.MATERN:
            if self.smoothness is None or self.smoothness <= 0:
                raise ValueError("Matern requires smoothness > 0")
            if (self.range is None) == (self.kappa is None):
                raise ValueError("Matern requires exactly one of range or kappa")
            if self.kappa is None:
                object.__setattr__(self, "kappa", 1.0 / self.range)
            else:
                object.__setattr__(self, "range", 1.0 / self.kappa)
            if self.kappa <= 0:
                raise ValueError("kappa must be > 0")
        else:
            if self.smoothness is not None:
                raise ValueError("smoothness only applies to the Matern family")
            if self.range is None or self.range <= 0:
                raise ValueError("range must be > 0")

    def with_params(self, variance: float = None, range: float = None) -> "CovarianceSpec":
        """Copy with variance and/or range replaced (kappa rederived for Matern)."""
        return CovarianceSpec(
            family=self.family,
            variance=self.variance if variance is None else variance,
            range=self.range if range is None else range,
            kappa=None,
            smoothness=self.smoothness,
            metric=self.metric,
        )

    def to_json(self) -> dict:
        out = {
            "family": self.family.value,
            "variance": self.variance,
            "range": self.range,
            "metric": self.metric.value,
        }
        if self.family is CovFamily.MATERN:
            out["smoothness"] = self.smoothness
            out["kappa"] = self.kappa
        return out

    @classmethod
    def from_json(cls, d: dict) -> "CovarianceSpec":
        family = CovFamily.from_string(d["family"])
        return cls(
            family=family,
            variance=float(d["variance"]),
            range=float(d["range"]) if d.get("range") is not None else None,
            kappa=float(d["kappa"]) if d.get("kappa") is not None and d.get("range") is None else None,
            smoothness=float(d["smoothness"]) if d.get("smoothness") is not None else None,
            metric=DistanceMetric.from_string(d.get("metric", "euclidean")),
        )


def matern_correlation_general(lam: float, x) -> np.ndarray:
    """Matern correlation 2^(1-lam)/Gamma(lam) * x^lam * K_lam(x) via Bessel K.

    Valid for any lam > 0; the x -> 0 limit (correlation 1) is substituted
    where kv underflows or x is exactly zero.
    """
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        logc = (1.0 - lam) * math.log(2.0) - gammaln(lam) + lam * np.log(xp)
        with np.errstate(over="ignore", invalid="ignore"):
            val = np.exp(logc) * kv(lam, xp)
        # kv underflows to 0 for large x; the correlation is 0 there anyway
        out[pos] = np.where(np.isfinite(val), val, 0.0)
    return out


def _matern_correlation(lam: float, x: np.ndarray) -> np.ndarray:
    if lam == 0.5:
        return np.exp(-x)
    if lam == 1.5:
        return (1.0 + x) * np.exp(-x)
    if lam == 2.5:
        return (1.0 + x + x * x / 3.0) * np.exp(-x)
    return matern_correlation_general(lam, x)


def cov_value(spec: CovarianceSpec, u) -> np.ndarray:
    """Covariance at separation distance u (scalar or array), in spec units."""
    u_arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u_arr)):
        raise ValueError("distance must be finite")
    if np.any(u_arr < 0):
        raise ValueError("distance must be non-negative")
    s2 = spec.variance
    if spec.family is CovFamily.EXPONENTIAL:
        val = s2 * np.exp(-u_arr / spec.range)
    elif spec.family is CovFamily.SQUARED_EXPONENTIAL:
        val = s2 * np.exp(-0.5 * (u_arr / spec.range) ** 2)
    else:
        val = s2 * _matern_correlation(spec.smoothness, spec.kappa * u_arr)
    if np.isscalar(u) or np.ndim(u) == 0:
        return float(val)
    return val


def cov_matrix(pts, spec: CovarianceSpec, jitter: float = None) -> np.ndarray:
    """Dense covariance matrix over `pts` with a diagonal jitter.

    jitter defaults to 1e-8 * variance; duplicate coordinates in survey
    data make some jitter necessary for the Cholesky factorization.
    """
    if jitter is None:
        jitter = 1e-8 * spec.variance
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    d = distance_matrix(pts, spec.metric)
    k = cov_value(spec, d)
    k[np.diag_indices_from(k)] += jitter
    return k


def chol_or_raise(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, raising NumericalError with the smallest pivot."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(mat)[0])
        raise NumericalError(
            f"covariance matrix is not positive definite (smallest pivot {smallest:.3e})"
        )
