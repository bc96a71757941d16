import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import nbinom

from tstar.errors import ConfigError
from tstar.nbdist import (
    NegBinParams,
    log_likelihood,
    logpmf,
    moments,
    nll_grad,
    pmf,
    sample,
    sample_arrays,
    support_bound,
)

positive = st.floats(0.05, 40.0)


def product_formula(mu, r, k):
    """Direct evaluation for integer shape, written without log-gamma."""
    return math.comb(k + r - 1, k) * (r / (r + mu)) ** r * (mu / (r + mu)) ** k


class TestParams:
    @pytest.mark.parametrize("mu, r", [(0, 1), (-1, 1), (1, 0), (1, -2), (float("nan"), 1), (1, float("inf"))])
    def test_invalid(self, mu, r):
        with pytest.raises(ConfigError):
            NegBinParams(mu, r)

    def test_success_probability(self):
        assert NegBinParams(3.0, 1.0).p == 0.75

    @given(positive, positive)
    def test_variance_dominates_mean(self, mu, r):
        m, v = moments(NegBinParams(mu, r))
        assert m == mu and v == mu + mu**2 / r and v >= m


class TestPmf:
    def test_geometric_case(self):
        p = NegBinParams(1.0, 1.0)
        assert pmf(p, 0) == pytest.approx(0.5, rel=1e-14)
        assert pmf(p, 1) == pytest.approx(0.25, rel=1e-14)
        assert log_likelihood(p, 0) == pytest.approx(math.log(0.5), rel=1e-14)

    @pytest.mark.parametrize("mu, r, k", [(2.0, 3, 0), (2.0, 3, 4), (0.4, 1, 2), (7.5, 5, 11), (12.0, 2, 30)])
    def test_matches_product_formula(self, mu, r, k):
        assert pmf(NegBinParams(mu, r), k) == pytest.approx(product_formula(mu, r, k), rel=1e-12)

    @given(positive, positive, st.integers(0, 200))
    def test_matches_scipy(self, mu, r, k):
        # scipy's nbinom counts failures with success probability r / (r + mu)
        expected = nbinom.logpmf(k, r, r / (r + mu))
        assert logpmf(mu, r, k) == pytest.approx(expected, rel=1e-10, abs=1e-10)

    @given(positive, positive, st.integers(0, 60))
    def test_in_unit_interval(self, mu, r, k):
        assert 0.0 <= pmf(NegBinParams(mu, r), k) <= 1.0

    def test_large_counts_stay_finite(self):
        assert np.isfinite(logpmf(3.0, 2.0, 10**6))
        assert np.isfinite(logpmf(1e5, 0.1, 10**5))

    def test_sums_to_one(self, rng):
        for mu, r in zip(rng.uniform(0.05, 30, 50), rng.uniform(0.1, 20, 50)):
            params = NegBinParams(mu, r)
            K = support_bound(params, tail=1e-12)
            total = pmf(params, np.arange(K + 1)).sum()
            assert total >= 1 - 1e-9 and total <= 1 + 1e-9

    def test_mass_at_zero_as_mean_vanishes(self):
        nll = [-logpmf(mu, 2.0, 0) for mu in (1e-2, 1e-5, 1e-9)]
        assert nll[0] > nll[1] > nll[2] > 0 and nll[2] < 1e-8

    @pytest.mark.parametrize("mu, r, k", [(1, 1, -1), (0, 1, 0), (1, 0, 0)])
    def test_invalid_inputs(self, mu, r, k):
        with pytest.raises(ConfigError):
            logpmf(mu, r, k)


class TestGradient:
    @given(st.floats(0.2, 30), st.floats(0.2, 30), st.integers(0, 40))
    def test_central_differences(self, mu, r, k):
        d_mu, d_r = nll_grad(mu, r, k)
        h = 1e-6
        fd_mu = -(logpmf(mu + h * mu, r, k) - logpmf(mu - h * mu, r, k)) / (2 * h * mu)
        fd_r = -(logpmf(mu, r + h * r, k) - logpmf(mu, r - h * r, k)) / (2 * h * r)
        assert d_mu == pytest.approx(fd_mu, rel=1e-4, abs=1e-6)
        assert d_r == pytest.approx(fd_r, rel=1e-4, abs=1e-6)

    @given(st.integers(1, 50), st.floats(0.1, 50))
    def test_stationary_at_observed_count(self, k, r):
        d_mu, _ = nll_grad(float(k), r, k)
        assert abs(d_mu) < 1e-12


class TestSampling:
    def test_moments_by_monte_carlo(self):
        x = sample(NegBinParams(2.0, 4.0), 10**6, 123)
        assert abs(x.mean() - 2.0) / 2.0 < 0.01
        assert abs(x.var(ddof=1) - 3.0) / 3.0 < 0.02

    def test_reproducible(self):
        a = sample(NegBinParams(3.0, 1.5), 1000, 7)
        b = sample(NegBinParams(3.0, 1.5), 1000, 7)
        assert np.array_equal(a, b)

    def test_single_draw(self):
        x = sample(NegBinParams(1.0, 1.0), 1, 0)
        assert x.shape == (1,) and x[0] >= 0 and x.dtype.kind == "i"

    def test_zero_draws_rejected(self):
        with pytest.raises(ConfigError):
            sample(NegBinParams(1.0, 1.0), 0, 0)

    @pytest.mark.parametrize("mu, r", [(0.3, 0.5), (1.0, 1.0), (2.0, 4.0), (6.0, 2.5), (15.0, 20.0)])
    def test_frequencies_follow_pmf(self, mu, r):
        n = 10**6
        x = sample(NegBinParams(mu, r), n, 2024)
        K = support_bound(NegBinParams(mu, r), tail=1e-6)
        freq = np.bincount(x, minlength=K + 1)[: K + 1] / n
        prob = pmf(NegBinParams(mu, r), np.arange(K + 1))
        se = np.sqrt(prob * (1 - prob) / n)
        assert np.all(np.abs(freq - prob) <= 5 * se + 1e-6)

    def test_array_shapes(self, rng):
        out = sample_arrays(np.full((3, 2), 2.0), np.ones((3, 2)), 5, rng)
        assert out.shape == (3, 2, 5)
