import math

import numpy as np
import pytest
from scipy import stats

from marglik.core import (
    NumericalError,
    RngStream,
    as_generator,
    batched_mvn_logpdf,
    cholesky_ridge,
    largest_remainder,
    log_mean_exp,
    log_mean_exp_rows,
    log_sum_exp,
    mvn_logpdf,
    mvt_logpdf,
    normalized_weight_moments,
)

from oracles import lse_mp


class TestLogSumExp:
    def test_matches_high_precision(self, rng):
        x = rng.normal(0, 50, size=200)
        assert log_sum_exp(x) == pytest.approx(lse_mp(x), abs=1e-12)

    def test_no_overflow(self):
        assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0))
        assert log_sum_exp([-1000.0, -1000.0]) == pytest.approx(-1000.0 + math.log(2.0))

    def test_neg_inf_entries_are_zeros(self):
        assert log_sum_exp([-np.inf, 0.0]) == 0.0
        assert log_sum_exp([-np.inf, -np.inf]) == -np.inf

    def test_rejects_nan_and_pos_inf(self):
        with pytest.raises(NumericalError):
            log_sum_exp([0.0, np.nan])
        with pytest.raises(NumericalError):
            log_sum_exp([0.0, np.inf])

    def test_empty(self):
        with pytest.raises(ValueError):
            log_sum_exp([])

    def test_log_mean_exp(self, rng):
        x = rng.normal(size=37)
        assert log_mean_exp(x) == pytest.approx(math.log(np.mean(np.exp(x))), rel=1e-13)

    def test_rows(self, rng):
        a = rng.normal(0, 30, size=(5, 40))
        a[2] = -np.inf
        out = log_mean_exp_rows(a)
        assert out[2] == -np.inf
        for i in (0, 1, 3, 4):
            assert out[i] == pytest.approx(log_mean_exp(a[i]), abs=1e-12)


class TestWeightMoments:
    def test_uniform_weights(self):
        sum_sq, ess = normalized_weight_moments(np.zeros(50))
        assert sum_sq == pytest.approx(1 / 50)
        assert ess == pytest.approx(50)

    def test_single_dominant(self):
        sum_sq, ess = normalized_weight_moments([0.0, -800.0, -900.0])
        assert ess == pytest.approx(1.0)

    def test_zero_total(self):
        with pytest.raises(NumericalError):
            normalized_weight_moments([-np.inf, -np.inf])


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(3).child("like", 7).generator().normal(size=5)
        b = RngStream(3).child("like", 7).generator().normal(size=5)
        np.testing.assert_array_equal(a, b)

    def test_order_independent(self):
        s = RngStream(3)
        first = s.child("x").generator().normal(size=3)
        s.child("y").generator().normal(size=100)
        again = s.child("x").generator().normal(size=3)
        np.testing.assert_array_equal(first, again)

    def test_distinct_paths(self):
        s = RngStream(3)
        a = s.child("like", 1).generator().normal(size=4)
        b = s.child("like", 2).generator().normal(size=4)
        c = RngStream(4).child("like", 1).generator().normal(size=4)
        assert not np.allclose(a, b)
        assert not np.allclose(a, c)

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            RngStream(0).child(-1).generator()

    def test_as_generator(self):
        g = np.random.default_rng(0)
        assert as_generator(g) is g
        assert isinstance(as_generator(5), np.random.Generator)
        assert isinstance(as_generator(RngStream(1)), np.random.Generator)


class TestGaussians:
    def test_mvn_against_scipy(self, rng):
        cov = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, -0.2], [0.1, -0.2, 0.5]])
        mean = np.array([0.1, -1.0, 2.0])
        x = rng.normal(size=(10, 3))
        L = np.linalg.cholesky(cov)
        np.testing.assert_allclose(mvn_logpdf(x, mean, L), stats.multivariate_normal(mean, cov).logpdf(x))

    def test_mvt_against_scipy(self, rng):
        cov = np.array([[1.5, 0.4], [0.4, 0.8]])
        x = rng.normal(size=(10, 2))
        L = np.linalg.cholesky(cov)
        ref = stats.multivariate_t(loc=np.zeros(2), shape=cov, df=4.0).logpdf(x)
        np.testing.assert_allclose(mvt_logpdf(x, np.zeros(2), L, 4.0), ref)

    def test_batched(self, rng):
        G, N, d = 3, 7, 2
        x = rng.normal(size=(G, N, d))
        means = rng.normal(size=(G, d))
        covs = [np.array([[1.0 + g, 0.2], [0.2, 0.5]]) for g in range(G)]
        Ls = np.stack([np.linalg.cholesky(c) for c in covs])
        inv = np.linalg.inv(Ls)
        hl = np.sum(np.log(np.diagonal(Ls, axis1=1, axis2=2)), axis=1)
        out = batched_mvn_logpdf(x, means, inv, hl)
        for g in range(G):
            np.testing.assert_allclose(out[g], stats.multivariate_normal(means[g], covs[g]).logpdf(x[g]))

    def test_cholesky_ridge_rescues_singular(self):
        cov = np.ones((3, 3))
        L = cholesky_ridge(cov)
        assert np.all(np.isfinite(L))
        np.testing.assert_allclose(L @ L.T, cov, atol=1e-6)


@pytest.mark.parametrize("weights,total", [([0.5, 0.5], 7), ([0.95, 0.05], 100), ([0.2, 0.3, 0.5], 11)])
def test_largest_remainder(weights, total):
    counts = largest_remainder(weights, total)
    assert counts.sum() == total
    assert np.all(np.abs(counts - np.asarray(weights) / sum(weights) * total) < 1)
