import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from cwiv.errors import FactorizationError, RankError, WeightError
from cwiv.mathcore import (
    RngStream,
    cholesky,
    ecdf_bins,
    mvn_sample,
    ols_fit,
    std_normal_cdf,
    std_normal_pdf,
    std_normal_quantile,
    weighted_cov,
)


def quadrature_normal_cdf(x: float) -> float:
    """Independent oracle: integrate the density numerically."""
    if x < 0:
        return 1.0 - quadrature_normal_cdf(-x)
    val, _ = integrate.quad(lambda t: np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi), 0, x)
    return 0.5 + val


class TestNormalCdf:
    def test_zero_is_half(self):
        assert std_normal_cdf(0.0) == 0.5

    def test_against_quadrature_oracle(self):
        for x in [-4.0, -2.5, -1.0, -0.3, 0.7, 1.959964, 3.3, 6.0]:
            assert std_normal_cdf(x) == pytest.approx(quadrature_normal_cdf(x), abs=1e-12)

    def test_value_at_975_quantile(self):
        assert std_normal_cdf(1.959964) == pytest.approx(0.975, abs=1e-6)

    def test_symmetry(self):
        xs = np.linspace(-6, 6, 41)
        assert np.all(np.abs(std_normal_cdf(xs) + std_normal_cdf(-xs) - 1.0) <= 1e-14)

    def test_monotone(self):
        xs = np.linspace(-9, 9, 2001)
        assert np.all(np.diff(std_normal_cdf(xs)) >= 0)


class TestNormalQuantile:
    def test_median(self):
        assert std_normal_quantile(0.5) == 0.0

    def test_975(self):
        # Bisection oracle on the cdf.
        lo, hi = 0.0, 10.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if std_normal_cdf(mid) < 0.975:
                lo = mid
            else:
                hi = mid
        assert std_normal_quantile(0.975) == pytest.approx(0.5 * (lo + hi), abs=1e-5)
        assert std_normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-5)

    def test_roundtrip_grid(self):
        ps = np.linspace(0.001, 0.999, 999)
        back = std_normal_cdf(std_normal_quantile(ps))
        assert np.max(np.abs(back - ps)) < 1e-10

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2, 1.7, np.nan])
    def test_domain_error(self, p):
        with pytest.raises(ValueError):
            std_normal_quantile(p)


class TestCholesky:
    def test_identity(self):
        eye = np.eye(3)
        assert np.array_equal(cholesky(eye), eye)

    def test_hand_example(self):
        lower = cholesky(np.array([[4.0, 2.0], [2.0, 2.0]]))
        # L @ L.T check by hand: [[2,0],[1,1]] reproduces the input.
        assert np.allclose(lower, [[2.0, 0.0], [1.0, 1.0]], atol=1e-12)

    def test_indefinite_raises_with_pivot(self):
        with pytest.raises(FactorizationError) as err:
            cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert err.value.pivot == 1

    def test_semidefinite_zero_row(self):
        sigma = np.diag([1.0, 0.0, 2.0])
        lower = cholesky(sigma)
        assert np.allclose(lower @ lower.T, sigma, atol=1e-12)

    def test_roundtrip_random_factors(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            k = rng.integers(1, 6)
            lower = np.tril(rng.normal(size=(k, k)))
            lower[np.diag_indices(k)] = np.abs(lower[np.diag_indices(k)]) + 0.5
            sigma = lower @ lower.T
            again = cholesky(sigma)
            assert np.allclose(again, lower, rtol=1e-9, atol=1e-9)
            assert np.max(np.abs(again @ again.T - sigma)) < 1e-10 * max(1, np.max(np.abs(sigma)))


class TestMvnSample:
    def test_zero_covariance_returns_mean(self):
        out = mvn_sample([1.0, -2.0], np.zeros((2, 2)), 5, RngStream(3))
        assert np.array_equal(out, np.tile([1.0, -2.0], (5, 1)))

    def test_determinism(self):
        s = RngStream(11, (4, 2))
        a = mvn_sample([0.0], np.eye(1), 100, s)
        b = mvn_sample([0.0], np.eye(1), 100, s)
        assert np.array_equal(a, b)

    def test_distinct_paths_differ(self):
        a = mvn_sample([0.0], np.eye(1), 100, RngStream(11, (0,)))
        b = mvn_sample([0.0], np.eye(1), 100, RngStream(11, (1,)))
        assert not np.array_equal(a, b)

    def test_empirical_moments(self):
        sigma = np.array([[1.0, 0.5, 0.25], [0.5, 1.0, 0.0], [0.25, 0.0, 0.25]])
        draws = mvn_sample(np.zeros(3), sigma, 100_000, RngStream(5))
        emp = np.cov(draws.T, bias=True)
        assert np.max(np.abs(emp - sigma)) < 0.05

    def test_identity_offdiag_small(self):
        draws = mvn_sample(np.zeros(2), np.eye(2), 100_000, RngStream(9))
        corr = np.corrcoef(draws.T)
        assert abs(corr[0, 1]) < 0.02


class TestWeightedCov:
    def test_constant_weights_match_unweighted(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=50), rng.normal(size=50)
        unweighted = float(np.mean((a - a.mean()) * (b - b.mean())))
        for c in [1.0, 0.37, 12.0]:
            got = weighted_cov(a, b, np.full(50, c))
            assert got == pytest.approx(unweighted, rel=1e-14)

    def test_hand_value(self):
        # From the definition: weighted mean 2.25, weighted variance 0.6875.
        got = weighted_cov(np.array([1.0, 2, 3]), np.array([1.0, 2, 3]), np.array([1.0, 1, 2]))
        assert got == pytest.approx(0.6875, abs=1e-15)

    def test_constant_series_is_zero(self):
        assert weighted_cov(np.full(4, 3.3), np.arange(4.0), np.ones(4)) == 0.0

    def test_zero_weights_raise(self):
        with pytest.raises(WeightError):
            weighted_cov(np.arange(3.0), np.arange(3.0), np.zeros(3))

    def test_negative_weights_raise(self):
        with pytest.raises(WeightError):
            weighted_cov(np.arange(3.0), np.arange(3.0), np.array([1.0, -1.0, 1.0]))

    @given(
        st.lists(st.floats(-100, 100), min_size=2, max_size=30),
        st.floats(0.01, 100.0),
        st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_scale_invariance(self, values, scale, seed):
        a = np.asarray(values)
        rng = np.random.default_rng(seed)
        b = rng.normal(size=a.size)
        w = rng.uniform(0.1, 2.0, size=a.size)
        assert weighted_cov(a, b, w) == pytest.approx(weighted_cov(a, b, w * scale), rel=1e-12, abs=1e-12)


class TestOlsFit:
    def test_exact_span_gives_zero_residuals(self):
        x = np.column_stack([np.ones(6), np.arange(6.0)])
        y = x @ np.array([2.0, -0.5])
        _, resid = ols_fit(x, y)
        assert np.max(np.abs(resid)) < 1e-12

    def test_intercept_only_demeans(self):
        y = np.array([1.0, 4.0, 7.0])
        _, resid = ols_fit(np.ones((3, 1)), y)
        assert np.allclose(resid, y - y.mean())

    def test_two_regressor_normal_equations(self):
        rng = np.random.default_rng(12)
        x = np.column_stack([np.ones(40), rng.normal(size=40)])
        y = rng.normal(size=40)
        coef, resid = ols_fit(x, y)
        # Oracle: solve the 2x2 normal equations directly.
        gram = x.T @ x
        expected = np.linalg.solve(gram, x.T @ y)
        assert np.allclose(coef, expected, rtol=1e-10)
        assert np.max(np.abs(x.T @ resid)) < 1e-8 * np.linalg.norm(y)

    def test_collinear_column_named(self):
        x = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
        with pytest.raises(RankError) as err:
            ols_fit(x, np.arange(10.0))
        assert err.value.column == 2

    def test_residuals_orthogonal_random(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(100, 4))
        y = rng.normal(size=100)
        _, resid = ols_fit(x, y)
        rel = np.abs(x.T @ resid) / (np.linalg.norm(x, axis=0) * np.linalg.norm(y))
        assert np.max(rel) < 1e-8


class TestEcdfBins:
    def test_single_bin(self):
        assert np.array_equal(ecdf_bins(np.array([3.0, 1.0, 2.0]), 1), [1, 1, 1])

    def test_rank_order(self):
        # Sort-based oracle: bin index follows the rank of each value.
        x = np.array([5.0, 1.0, 3.0, 2.0, 4.0])
        assert np.array_equal(ecdf_bins(x, 5), [5, 1, 3, 2, 4])

    def test_balanced_sizes(self):
        rng = np.random.default_rng(1)
        for n, j in [(10, 5), (11, 5), (100, 7), (57, 8)]:
            bins = ecdf_bins(rng.normal(size=n), j)
            counts = np.bincount(bins, minlength=j + 1)[1:]
            assert counts.max() - counts.min() <= 1
            assert counts.sum() == n

    def test_tie_break_by_original_index(self):
        x = np.array([1.0, 1.0, 1.0, 1.0])
        assert np.array_equal(ecdf_bins(x, 2), [1, 1, 2, 2])

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=30)
        perm = rng.permutation(30)
        assert np.array_equal(ecdf_bins(x, 4)[perm], ecdf_bins(x[perm], 4))

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            ecdf_bins(np.arange(3.0), 0)
        with pytest.raises(ValueError):
            ecdf_bins(np.arange(3.0), 4)


class TestRngStream:
    def test_child_extends_path(self):
        s = RngStream(1).child(2, 3)
        assert s.path == (2, 3)

    def test_negative_path_rejected(self):
        with pytest.raises(ValueError):
            RngStream(1, (-1,))

    def test_same_path_same_bits(self):
        a = RngStream(99, (1, 2)).generator().integers(0, 2**63, 16)
        b = RngStream(99, (1, 2)).generator().integers(0, 2**63, 16)
        assert np.array_equal(a, b)
