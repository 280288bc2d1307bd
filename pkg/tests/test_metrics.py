"""Forecast-verification scores: independent oracles and hand-computed cases.

Oracles used here:
  * exact piecewise integration of the empirical-CDF definition of the CRPS
    (the integrand is piecewise constant between sorted breakpoints, so the
    integral is computed exactly, not by approximate quadrature);
  * numerical quadrature of the Gaussian-CDF CRPS definition;
  * hand-computed interval-score / coverage cases (worked in comments).
"""

import math

import numpy as np
import pytest
from scipy import integrate

from flowcast import (
    DimensionMismatch,
    EmptyMask,
    InvertedInterval,
    MismatchedCoverage,
    ScoreReport,
    coverage_90,
    crps_ensemble,
    crps_fields,
    crps_gaussian,
    ensemble_quantiles,
    gaussian_quantiles,
    interval_score_90,
    rmspe,
    score_ensemble_forecast,
    score_gaussian_forecast,
    score_ratio_table,
)


def crps_empirical_exact(members, y):
    """Exact integral of (F_N(u) - 1{u >= y})^2 du for the empirical CDF.

    The integrand is piecewise constant between the breakpoints given by the
    sorted member values and y, and zero outside their hull, so summing
    value-at-midpoint times segment length is exact.
    """
    pts = np.sort(np.append(np.asarray(members, dtype=float), y))
    total = 0.0
    xs = np.sort(np.asarray(members, dtype=float))
    n = xs.size
    for a, b in zip(pts[:-1], pts[1:]):
        if b == a:
            continue
        mid = 0.5 * (a + b)
        cdf = np.searchsorted(xs, mid, side="right") / n
        step = 1.0 if mid >= y else 0.0
        total += (cdf - step) ** 2 * (b - a)
    return total


class TestRmspe:
    def test_hand_case(self):
        # errors (1, -1, 3, 3) on 4 pixels: mean square = (1+1+9+9)/4 = 5.
        pred = np.array([1.0, 2.0, 3.0, 4.0])
        truth = np.array([0.0, 3.0, 0.0, 1.0])
        assert rmspe(pred, truth) == pytest.approx(math.sqrt(5.0), rel=1e-15)

    def test_mask_restricts_pixels(self):
        pred = np.array([1.0, 100.0])
        truth = np.array([0.0, 0.0])
        mask = np.array([True, False])
        assert rmspe(pred, truth, mask) == pytest.approx(1.0, rel=1e-15)

    def test_empty_mask_rejected(self):
        with pytest.raises(EmptyMask):
            rmspe(np.ones(3), np.ones(3), np.zeros(3, dtype=bool))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionMismatch):
            rmspe(np.ones(3), np.ones(4))

    def test_perfect_forecast_is_zero(self):
        x = np.linspace(-2, 5, 17)
        assert rmspe(x, x.copy()) == 0.0


class TestCrpsEnsemble:
    def test_two_member_hand_case(self):
        # members {0, 2}, y = 1:
        #   (1/N) sum |x_i - y| = (1 + 1)/2 = 1
        #   (1/(2N^2)) sum_ij |x_i - x_j| = (0+2+2+0)/8 = 0.5
        #   CRPS = 1 - 0.5 = 0.5
        assert crps_ensemble(np.array([0.0, 2.0]), 1.0) == pytest.approx(0.5, abs=1e-15)

    def test_single_member_is_absolute_error(self):
        assert crps_ensemble(np.array([3.0]), 1.25) == pytest.approx(1.75, abs=1e-15)

    def test_matches_exact_cdf_integral(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            n = int(rng.integers(2, 40))
            members = rng.normal(size=n) * rng.uniform(0.2, 3.0)
            y = rng.normal() * 2.0
            got = crps_ensemble(members, y)
            want = crps_empirical_exact(members, y)
            assert got == pytest.approx(want, abs=1e-6)

    def test_ties_in_members(self):
        members = np.array([1.0, 1.0, 1.0, 2.0])
        y = 0.5
        assert crps_ensemble(members, y) == pytest.approx(
            crps_empirical_exact(members, y), abs=1e-12
        )

    def test_positive_affine_equivariance(self):
        # CRPS(a*X + b, a*y + b) = a * CRPS(X, y) for a > 0.
        rng = np.random.default_rng(7)
        members = rng.normal(size=12)
        y = 0.3
        a, b = 2.5, -1.0
        assert crps_ensemble(a * members + b, a * y + b) == pytest.approx(
            a * crps_ensemble(members, y), rel=1e-12
        )

    def test_fields_mean_matches_scalar(self):
        rng = np.random.default_rng(3)
        members = rng.normal(size=(8, 5))  # N=8 members, 5 pixels
        truth = rng.normal(size=5)
        got = crps_fields(members, truth)
        want = np.mean([crps_ensemble(members[:, j], truth[j]) for j in range(5)])
        assert got == pytest.approx(want, rel=1e-12)

    def test_fields_mask(self):
        rng = np.random.default_rng(4)
        members = rng.normal(size=(6, 4))
        truth = rng.normal(size=4)
        mask = np.array([True, False, True, False])
        got = crps_fields(members, truth, mask)
        want = np.mean([crps_ensemble(members[:, j], truth[j]) for j in (0, 2)])
        assert got == pytest.approx(want, rel=1e-12)


class TestCrpsGaussian:
    def test_matches_numerical_integration(self):
        # CRPS = integral of (Phi((u-mu)/sd) - 1{u >= y})^2 du.
        from scipy.stats import norm

        rng = np.random.default_rng(11)
        for _ in range(8):
            mu = float(rng.normal())
            sd = float(rng.uniform(0.3, 2.0))
            y = float(rng.normal() * 2)

            def integrand(u):
                return (norm.cdf((u - mu) / sd) - (u >= y)) ** 2

            lo = min(mu - 10 * sd, y - 1.0)
            hi = max(mu + 10 * sd, y + 1.0)
            want, err = integrate.quad(integrand, lo, hi, points=[y], limit=200)
            assert err < 1e-7
            assert crps_gaussian(mu, sd, y) == pytest.approx(want, abs=1e-6)

    def test_zero_sd_point_forecast_limit(self):
        # Degenerate (deterministic) forecast: CRPS collapses to |mean - y|.
        assert crps_gaussian(1.0, 0.0, 3.5) == pytest.approx(2.5, abs=1e-15)
        assert crps_gaussian(np.array([1.0, 2.0]), np.array([0.0, 1.0]), np.array([1.0, 2.0]))[
            0
        ] == pytest.approx(0.0, abs=1e-15)

    def test_negative_sd_rejected(self):
        with pytest.raises(InvertedInterval):
            crps_gaussian(0.0, -1.0, 0.0)

    def test_at_mean_known_value(self):
        # y = mu: CRPS = sd * (2*pdf(0) - 1/sqrt(pi)) = sd*(sqrt(2/pi) - 1/sqrt(pi)).
        sd = 1.7
        want = sd * (math.sqrt(2.0 / math.pi) - 1.0 / math.sqrt(math.pi))
        assert crps_gaussian(0.0, sd, 0.0) == pytest.approx(want, rel=1e-12)


class TestIntervalAndCoverage:
    def test_interval_score_hand_cases(self):
        # Case 1: y inside [0, 1] -> width only = 1.
        assert interval_score_90(
            np.array([0.0]), np.array([1.0]), np.array([0.5])
        ) == pytest.approx(1.0, abs=1e-15)
        # Case 2: y = 1.5 above u = 1 -> 1 + 20*(1.5-1) = 11.
        assert interval_score_90(
            np.array([0.0]), np.array([1.0]), np.array([1.5])
        ) == pytest.approx(11.0, abs=1e-13)
        # Case 3: y = -0.25 below l = 0 -> 1 + 20*0.25 = 6.
        assert interval_score_90(
            np.array([0.0]), np.array([1.0]), np.array([-0.25])
        ) == pytest.approx(6.0, abs=1e-13)
        # Mean over pixels: ((1) + (11)) / 2 = 6.
        assert interval_score_90(
            np.zeros(2), np.ones(2), np.array([0.5, 1.5])
        ) == pytest.approx(6.0, abs=1e-13)

    def test_interval_score_inverted_rejected(self):
        with pytest.raises(InvertedInterval):
            interval_score_90(np.array([1.0]), np.array([0.0]), np.array([0.5]))

    def test_coverage_counts_endpoints_as_covered(self):
        lo = np.array([0.0, 0.0, 0.0, 0.0])
        hi = np.array([1.0, 1.0, 1.0, 1.0])
        y = np.array([0.0, 1.0, 0.5, 2.0])  # 3 of 4 covered (ties count)
        assert coverage_90(lo, hi, y) == pytest.approx(0.75, abs=1e-15)

    def test_coverage_with_mask(self):
        lo = np.zeros(4)
        hi = np.ones(4)
        y = np.array([0.5, 5.0, 0.5, 5.0])
        mask = np.array([True, True, False, False])
        assert coverage_90(lo, hi, y, mask) == pytest.approx(0.5, abs=1e-15)


class TestQuantiles:
    def test_ensemble_quantiles_linear_interpolation(self):
        # Members 0..10: 5% quantile of linear interpolation = 0.5, 95% = 9.5.
        members = np.arange(11.0).reshape(11, 1)
        lo, hi = ensemble_quantiles(members)
        assert lo[0] == pytest.approx(0.5, abs=1e-12)
        assert hi[0] == pytest.approx(9.5, abs=1e-12)

    def test_gaussian_quantiles_symmetric(self):
        from scipy.stats import norm

        mean = np.array([2.0])
        sd = np.array([3.0])
        lo, hi = gaussian_quantiles(mean, sd)
        z = norm.ppf(0.95)
        assert lo[0] == pytest.approx(2.0 - 3.0 * z, rel=1e-12)
        assert hi[0] == pytest.approx(2.0 + 3.0 * z, rel=1e-12)

    def test_gaussian_quantiles_zero_sd_collapse(self):
        lo, hi = gaussian_quantiles(np.array([1.0]), np.array([0.0]))
        assert lo[0] == hi[0] == 1.0


class TestScoring:
    def test_gaussian_scoring_perfect_forecast(self):
        truth = np.linspace(0.0, 1.0, 9)
        rep = score_gaussian_forecast("m", truth, np.zeros(9), truth)
        assert rep.rmspe == 0.0
        assert rep.coverage == 1.0  # degenerate interval still covers ties
        assert rep.crps == pytest.approx(0.0, abs=1e-15)

    def test_ensemble_scoring_matches_components(self):
        rng = np.random.default_rng(5)
        members = rng.normal(size=(20, 6))
        truth = rng.normal(size=6)
        rep = score_ensemble_forecast("enkf", members, truth)
        assert rep.method == "enkf"
        assert rep.n_values == 6
        assert rep.rmspe == pytest.approx(rmspe(members.mean(axis=0), truth), rel=1e-12)
        lo, hi = ensemble_quantiles(members)
        assert rep.coverage == pytest.approx(coverage_90(lo, hi, truth), abs=1e-15)
        want_crps = np.mean(crps_fields(members, truth))
        assert rep.crps == pytest.approx(want_crps, rel=1e-12)

    def test_ratio_table_against_reference(self):
        a = ScoreReport("ref", rmspe=2.0, crps=1.0, interval_score=4.0, coverage=0.9, n_values=10)
        b = ScoreReport("new", rmspe=1.0, crps=0.5, interval_score=8.0, coverage=0.8, n_values=10)
        rows = score_ratio_table([a, b], "ref")
        by_method = {r["method"]: r for r in rows}
        assert by_method["new"]["rmspe_ratio"] == pytest.approx(0.5)
        assert by_method["new"]["crps_ratio"] == pytest.approx(0.5)
        assert by_method["new"]["interval_score_ratio"] == pytest.approx(2.0)
        assert by_method["ref"]["rmspe_ratio"] == pytest.approx(1.0)

    def test_ratio_table_mismatched_counts_rejected(self):
        a = ScoreReport("ref", 1.0, 1.0, 1.0, 0.9, n_values=10)
        b = ScoreReport("new", 1.0, 1.0, 1.0, 0.9, n_values=11)
        with pytest.raises(MismatchedCoverage):
            score_ratio_table([a, b], "ref")

    def test_ratio_table_missing_reference_rejected(self):
        a = ScoreReport("a", 1.0, 1.0, 1.0, 0.9, n_values=10)
        with pytest.raises(MismatchedCoverage):
            score_ratio_table([a], "nope")
