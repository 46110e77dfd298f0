"""Gradient/curvature checks for the response likelihoods via finite differences."""

import numpy as np
import pytest
from scipy.special import expit, gammaln

from prevmap.responses import betabinomial_parts, binomial_parts, gaussian_parts


def fd_grad_curv(fn, zeta, h=1e-5, h2=1e-4):
    # second differences need the wider step to stay above float noise
    grad = np.array([(fn(z + h) - fn(z - h)) / (2 * h) for z in zeta])
    curv = np.array([(fn(z + h2) - 2 * fn(z) + fn(z - h2)) / h2**2 for z in zeta])
    return grad, curv


class TestBinomial:
    def test_grad_and_curvature(self, rng):
        zeta = rng.normal(0, 1.5, 30)
        H = rng.integers(0, 86, 30).astype(float)
        N = np.full(30, 85.0)
        _, grad, W = binomial_parts(zeta, H, N)

        def ll_one(i):
            return lambda z: float(
                H[i] * np.log(expit(z)) + (N[i] - H[i]) * np.log(1 - expit(z))
            )

        for i in range(30):
            g_fd, c_fd = fd_grad_curv(ll_one(i), [zeta[i]])
            assert grad[i] == pytest.approx(g_fd[0], rel=1e-5, abs=1e-6)
            assert -W[i] == pytest.approx(c_fd[0], rel=1e-3, abs=1e-3)


class TestBetaBinomial:
    @staticmethod
    def logpmf(h, n, p, phi):
        a, b = p * phi, (1 - p) * phi
        return (
            gammaln(n + 1) - gammaln(h + 1) - gammaln(n - h + 1)
            + gammaln(h + a) + gammaln(n - h + b) - gammaln(n + phi)
            + gammaln(phi) - gammaln(a) - gammaln(b)
        )

    def test_variance_inflation_formula(self):
        """Enumerated variance equals N p (1-p) (1 + (N-1)/(1+phi))."""
        n, p, phi = 20, 0.3, 4.0
        h = np.arange(n + 1)
        pmf = np.exp(self.logpmf(h, n, p, phi))
        assert pmf.sum() == pytest.approx(1.0, abs=1e-12)
        mean = (h * pmf).sum()
        var = ((h - mean) ** 2 * pmf).sum()
        assert mean == pytest.approx(n * p, rel=1e-10)
        assert var == pytest.approx(n * p * (1 - p) * (1 + (n - 1) / (1 + phi)), rel=1e-10)

    def test_binomial_limit(self):
        """phi -> infinity recovers the plain binomial likelihood.

        The deviation scales like N^2/phi, so phi = 1e7 brings it to ~1e-3
        while keeping the lgamma differences numerically clean.
        """
        zeta = np.array([-0.7, 0.2, 1.4])
        H = np.array([3.0, 40.0, 70.0])
        N = np.array([85.0, 85.0, 85.0])
        ll_bb, _, _ = betabinomial_parts(zeta, H, N, 1e7)
        ll_b, _, _ = binomial_parts(zeta, H, N)
        # both omit the binomial coefficient, so the limits agree directly
        assert ll_bb == pytest.approx(ll_b, abs=5e-3)

    def test_grad_matches_finite_differences(self, rng):
        zeta = rng.normal(0, 1.2, 20)
        H = rng.integers(0, 61, 20).astype(float)
        N = np.full(20, 60.0)
        phi = 5.0
        _, grad, _ = betabinomial_parts(zeta, H, N, phi)

        def ll_one(i):
            return lambda z: float(self.logpmf(H[i], N[i], expit(z), phi))

        for i in range(20):
            g_fd, _ = fd_grad_curv(ll_one(i), [zeta[i]])
            assert grad[i] == pytest.approx(g_fd[0], rel=1e-5, abs=1e-6)

    def test_curvature_matches_where_unclipped(self, rng):
        zeta = rng.normal(0, 0.8, 20)
        H = rng.integers(5, 56, 20).astype(float)
        N = np.full(20, 60.0)
        phi = 5.0
        _, _, W = betabinomial_parts(zeta, H, N, phi)

        def ll_one(i):
            return lambda z: float(self.logpmf(H[i], N[i], expit(z), phi))

        for i in range(20):
            _, c_fd = fd_grad_curv(ll_one(i), [zeta[i]])
            if -c_fd[0] > 1e-4:  # clipping floor only binds on flat spots
                assert W[i] == pytest.approx(-c_fd[0], rel=1e-3, abs=1e-3)


class TestGaussian:
    def test_grad_and_curvature(self, rng):
        zeta = rng.normal(0.4, 0.2, 10)
        y = rng.uniform(0, 1, 10)
        nv = 0.04
        ll, grad, W = gaussian_parts(zeta, y, None, nv)
        np.testing.assert_allclose(grad, (y - zeta) / nv, rtol=1e-12)
        np.testing.assert_allclose(W, 1 / nv, rtol=1e-12)
        expect = (-0.5 * (y - zeta) ** 2 / nv - 0.5 * np.log(2 * np.pi * nv)).sum()
        assert ll == pytest.approx(expect, rel=1e-12)
