"""Per-observation response log-likelihoods in the linear predictor.

Each function returns (total loglik, gradient, curvature weight W) where W
is the negative second derivative clipped to a small positive floor so
Newton systems stay positive definite; the gradient is exact, so clipping
moves only the metric, not the optimum.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, gammaln, polygamma

W_FLOOR = 1e-12


def binomial_parts(zeta, H, N, _unused=None):
    p = expit(zeta)
    ll = H * np.log(np.clip(p, 1e-300, None)) + (N - H) * np.log(
        np.clip(1 - p, 1e-300, None)
    )
    grad = H - N * p
    W = np.maximum(N * p * (1 - p), W_FLOOR)
    return float(ll.sum()), grad, W


def betabinomial_parts(zeta, H, N, phi):
    """Beta-binomial with success probability Beta(p*phi, (1-p)*phi).

    Variance N p (1-p) (1 + (N-1)/(1+phi)); phi -> inf recovers binomial.
    """
    p = expit(zeta)
    a = p * phi
    b = (1.0 - p) * phi
    ll = (
        gammaln(H + a)
        - gammaln(a)
        + gammaln(N - H + b)
        - gammaln(b)
        + gammaln(phi)
        - gammaln(N + phi)
    )
    dg = polygamma(0, H + a) - polygamma(0, a) - polygamma(0, N - H + b) + polygamma(0, b)
    s = phi * p * (1.0 - p)
    grad = s * dg
    dgp = polygamma(1, H + a) - polygamma(1, a) + polygamma(1, N - H + b) - polygamma(1, b)
    curv = s * (1.0 - 2.0 * p) * dg + s * s * dgp
    W = np.maximum(-curv, W_FLOOR)
    return float(ll.sum()), grad, W


def gaussian_parts(zeta, y, _unused, noise_var):
    resid = y - zeta
    ll = -0.5 * resid**2 / noise_var - 0.5 * np.log(2 * math.pi * noise_var)
    grad = resid / noise_var
    W = np.full(len(zeta), 1.0 / noise_var)
    return float(ll.sum()), grad, W
