import math
import time
import tracemalloc

import numpy as np
import pytest
from scipy.special import expit

from prevmap import frk
from prevmap.errors import BoundsError
from prevmap.frk import BasisSet, BauGrid, basis_eval, car_precision, place_basis
from prevmap.geodata import Location, SurveyRecord

from conftest import rand_locations

UNIT = (Location(0, 0), Location(1, 1))


class TestPlaceBasis:
    def test_unit_square_nres1_is_3x3(self):
        b = place_basis(UNIT, nres=1, regular=1)
        assert b.size == 9
        # aperture = scale_aperture * (span / count)
        assert b.apertures[0] == pytest.approx(1.25 * (1.0 / 3.0))

    def test_unit_square_nres2_adds_6x6(self):
        b = place_basis(UNIT, nres=2, regular=1)
        assert b.size == 45
        assert (b.resolution_id == 1).sum() == 9
        assert (b.resolution_id == 2).sum() == 36

    def test_regular_2_more_functions_smaller_apertures(self):
        b1 = place_basis(UNIT, nres=1, regular=1)
        b2 = place_basis(UNIT, nres=1, regular=2)
        assert b2.size > b1.size
        assert b2.apertures.max() < b1.apertures.min()

    def test_aspect_ratio_scales_long_side(self):
        b = place_basis((Location(0, 0), Location(2, 1)), nres=1, regular=1)
        # 3 along the short (lat) side, about 6 along the long side
        assert b.grid_shapes[0] == (6, 3)

    def test_apertures_constant_within_resolution(self):
        b = place_basis(UNIT, nres=3, regular=1)
        for k in (1, 2, 3):
            aps = b.apertures[b.resolution_id == k]
            assert np.ptp(aps) == 0.0

    def test_degenerate_bbox(self):
        with pytest.raises(ValueError):
            place_basis((Location(0, 0), Location(0, 1)))
        with pytest.raises(ValueError):
            place_basis(UNIT, nres=0)


class TestBasisEval:
    def test_own_centre_gives_one(self):
        b = place_basis(UNIT, nres=1)
        phi = basis_eval(b, b.centres)
        np.testing.assert_allclose(np.diag(phi), 1.0, atol=1e-15)

    def test_one_aperture_away(self):
        b = place_basis(UNIT, nres=1)
        pt = b.centres[4] + np.array([b.apertures[4], 0.0])
        phi = basis_eval(b, pt[None, :])
        assert phi[0, 4] == pytest.approx(math.exp(-0.5), rel=1e-12)

    def test_matches_elementwise_formula(self, rng):
        b = place_basis(UNIT, nres=2)
        pts = rng.uniform(0, 1, (10, 2))
        phi = basis_eval(b, pts)
        assert phi.shape == (10, b.size)
        for i in range(10):
            for l in range(b.size):
                d2 = ((pts[i] - b.centres[l]) ** 2).sum()
                assert phi[i, l] == pytest.approx(
                    math.exp(-0.5 * d2 / b.apertures[l] ** 2), rel=1e-12
                )
        assert np.all(phi > 0) and np.all(phi <= 1)


class TestBauGrid:
    def test_every_record_maps_to_exactly_one_bau(self, rng):
        locs = rand_locations(rng, 50, hi=(3.0, 2.0))
        bau = BauGrid.over_bbox((Location(0, 0), Location(3, 2)), 0.25)
        idx = bau.bau_index(locs)
        assert idx.shape == (50,)
        assert np.all((idx >= 0) & (idx < bau.n_baus))

    def test_edge_points_stay_inside(self):
        bau = BauGrid.over_bbox((Location(0, 0), Location(1, 1)), 0.5)
        idx = bau.bau_index([Location(1.0, 1.0), Location(0.0, 0.0)])
        assert idx[1] == 0

    def test_outside_raises(self):
        bau = BauGrid.over_bbox((Location(0, 0), Location(1, 1)), 0.5)
        with pytest.raises(BoundsError):
            bau.bau_index([Location(2.0, 0.5)])


class TestCarPrecision:
    def test_positive_definite_and_symmetric(self):
        Q = car_precision(3, 4, tau=1.5, rho=0.8)
        assert np.allclose(Q, Q.T)
        np.linalg.cholesky(Q)

    def test_rho_zero_is_scaled_identity(self):
        Q = car_precision(3, 3, tau=2.0, rho=0.0)
        np.testing.assert_allclose(Q, 2.0 * np.eye(9))


def two_bump_records(rng, n=150, span=6.0, n_tests=85):
    xy = rng.uniform(0, span, (n, 2))

    def surf(x, y):
        return (
            -1.5
            + 2.2 * np.exp(-(((x - 2) ** 2 + (y - 4) ** 2) / (2 * 1.2**2)))
            + 1.5 * np.exp(-(((x - 4.5) ** 2 + (y - 1.5) ** 2) / (2 * 0.9**2)))
        )

    p = expit(surf(xy[:, 0], xy[:, 1]))
    h = rng.binomial(n_tests, p)
    recs = [
        SurveyRecord(Location(float(a), float(b)), n_tests, int(k))
        for (a, b), k in zip(xy, h)
    ]
    return recs, surf


class TestFit:
    def test_all_zero_counts(self, rng):
        locs = rand_locations(rng, 40, hi=(3.0, 3.0))
        recs = [SurveyRecord(l, 85, 0) for l in locs]
        basis = place_basis((Location(0, 0), Location(3, 3)), nres=1)
        fit = frk.fit(recs, 0.5, basis)
        assert fit.beta0 < math.log(0.01 / 0.99)
        assert np.abs(fit.eta_mode).max() < 0.5
        mean, _ = frk.predict(fit, n_mc=200, seed=0)
        assert np.all(mean < 0.01)

    def test_single_basis_single_bau_matches_pooled_mle(self):
        # every record in one BAU, one basis function: the fitted logit
        # collapses to the empirical logit of the pooled counts
        rng = np.random.default_rng(3)
        locs = [Location(0.4 + 0.01 * i, 0.45) for i in range(5)]
        h = rng.binomial(2000, 0.23, 5)
        recs = [SurveyRecord(l, 2000, int(k)) for l, k in zip(locs, h)]
        basis = BasisSet(
            centres=np.array([[0.45, 0.45]]),
            apertures=np.array([1.0]),
            resolution_id=np.array([1]),
            grid_shapes=[(1, 1)],
            nres=1,
            regular=1,
            scale_aperture=1.25,
        )
        fit = frk.fit(recs, 1.0, basis, bbox=(Location(0, 0), Location(1, 1)))
        pooled = sum(r.positive for r in recs) / sum(r.examined for r in recs)
        phi = basis_eval(basis, fit.bau.centroids_xy()[fit.data_bau_idx])
        zeta = fit.beta0 + phi @ fit.eta_mode + fit.xi_mode
        assert zeta[0] == pytest.approx(math.log(pooled / (1 - pooled)), abs=1e-3)

    def test_beats_constant_intercept_on_smooth_surface(self, rng):
        recs, surf = two_bump_records(rng)
        bbox = (Location(0, 0), Location(6, 6))
        basis = place_basis(bbox, nres=2)
        fit = frk.fit(recs, 0.25, basis, bbox=bbox)
        mean, _ = frk.predict(fit, n_mc=400, seed=7)
        cxy = fit.bau.centroids_xy()
        truth = expit(surf(cxy[:, 0], cxy[:, 1]))
        rmse_fit = np.sqrt(np.mean((mean - truth) ** 2))
        p_const = np.mean([r.prevalence for r in recs])
        rmse_const = np.sqrt(np.mean((p_const - truth) ** 2))
        assert rmse_fit < rmse_const

    def test_needs_two_records(self):
        basis = place_basis(UNIT, nres=1)
        with pytest.raises(ValueError):
            frk.fit([SurveyRecord(Location(0.5, 0.5), 10, 1)], 0.5, basis)


class TestPredict:
    def make_fit(self, rng):
        recs, _ = two_bump_records(rng, n=80)
        bbox = (Location(0, 0), Location(6, 6))
        basis = place_basis(bbox, nres=1)
        return frk.fit(recs, 0.5, basis, bbox=bbox)

    def test_zero_scale_hook_collapses_to_mode(self, rng):
        fit = self.make_fit(rng)
        mean, sd = frk.predict(fit, n_mc=100, seed=5, laplace_scale=0.0)
        assert np.all(sd == 0.0)
        phi = basis_eval(fit.basis, fit.bau.centroids_xy())
        zeta = fit.beta0 + phi @ fit.eta_mode
        zeta[fit.data_bau_idx] += fit.xi_mode
        np.testing.assert_allclose(mean, expit(zeta), atol=1e-12)

    def test_deterministic_under_seed_and_threads(self, rng):
        fit = self.make_fit(rng)
        m1, s1 = frk.predict(fit, n_mc=400, seed=11, threads=1)
        m2, s2 = frk.predict(fit, n_mc=400, seed=11, threads=3)
        assert np.array_equal(m1, m2) and np.array_equal(s1, s2)
        m3, _ = frk.predict(fit, n_mc=400, seed=12)
        assert not np.array_equal(m1, m3)

    def test_mc_stability_400_vs_20000(self, rng):
        fit = self.make_fit(rng)
        m400, s400 = frk.predict(fit, n_mc=400, seed=3)
        m20k, _ = frk.predict(fit, n_mc=20000, seed=4)
        se = s400 / math.sqrt(400)
        frac = np.mean(np.abs(m400 - m20k) <= 3 * np.maximum(se, 1e-12))
        assert frac >= 0.95

    def test_predict_at_looks_up_containing_bau(self, rng):
        fit = self.make_fit(rng)
        mean, sd = frk.predict(fit, n_mc=200, seed=1)
        locs = [Location(1.3, 2.1), Location(4.9, 5.2)]
        m_at, s_at = frk.predict_at(fit, locs, n_mc=200, seed=1)
        idx = fit.bau.bau_index(locs)
        np.testing.assert_array_equal(m_at, mean[idx])
        np.testing.assert_array_equal(s_at, sd[idx])


class TestCostMonotonicity:
    def test_time_and_memory_grow_with_basis_count(self, rng):
        recs, _ = two_bump_records(rng, n=100)
        bbox = (Location(0, 0), Location(6, 6))
        results = {}
        for nres in (1, 3):
            basis = place_basis(bbox, nres=nres)
            tracemalloc.start()
            t0 = time.perf_counter()
            frk.fit(recs, 0.5, basis, bbox=bbox)
            elapsed = time.perf_counter() - t0
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            results[nres] = (elapsed, peak, basis.size)
        assert results[3][2] > results[1][2]
        assert results[3][0] > results[1][0]
        assert results[3][1] >= results[1][1]


class TestOscillationWitness:
    def test_report_periodicity_in_data_free_gap(self, rng):
        """Clustered data with a wide empty band: measure the dominant
        oscillation of the predicted surface along a transect through the
        gap and report it against the resolution-2 centre spacing.
        Reported, not asserted (the artifact depends on the fit)."""
        left = rand_locations(rng, 60, hi=(1.5, 6.0))
        right = [Location(l.lon + 6.5, l.lat) for l in rand_locations(rng, 60, hi=(1.5, 6.0))]
        p_of = lambda loc: 0.08 + 0.5 * math.exp(-((loc.lat - 3.0) ** 2))
        recs = [
            SurveyRecord(l, 85, int(rng.binomial(85, p_of(l)))) for l in left + right
        ]
        bbox = (Location(0, 0), Location(8, 6))
        basis = place_basis(bbox, nres=2)
        fit = frk.fit(recs, 0.25, basis, bbox=bbox)
        mean, _ = frk.predict(fit, n_mc=400, seed=2)
        grid = fit.bau.grid
        row = grid.n_rows // 2
        transect = mean.reshape(grid.n_rows, grid.n_cols)[row]
        cols = np.arange(grid.n_cols) * grid.cell_size + grid.origin.lon
        gap = (cols > 2.0) & (cols < 6.5)
        sig = transect[gap] - transect[gap].mean()
        spacing2 = np.diff(np.unique(basis.centres[basis.resolution_id == 2][:, 0]))[0]
        if np.ptp(sig) > 1e-12:
            freqs = np.fft.rfftfreq(len(sig), d=grid.cell_size)
            power = np.abs(np.fft.rfft(sig)) ** 2
            dom = freqs[1:][np.argmax(power[1:])]
            period = 1.0 / dom if dom > 0 else float("inf")
            print(
                f"\noscillation witness: dominant period {period:.2f} deg in the gap, "
                f"resolution-2 spacing {spacing2:.2f} deg"
            )
        assert np.all(np.isfinite(transect))
