import math

import numpy as np
import pytest

from marglik.core import NumericalError, RngStream
from marglik.is2 import (
    Is2Result,
    WeightedDraws,
    _analytic_se,
    bootstrap_se,
    compare_models,
    posterior_expectation,
    run_is2,
)
from marglik.likeest import ParticlePolicy
from marglik.proposal import ExactNormalREProposals, GaussianMixtureProposal, PriorREProposals

from oracles import FROZEN


def _g(model, data, widen=1.5, shift=0.0):
    m, sd = model.posterior_mu(data)
    return GaussianMixtureProposal([1.0], [[m + shift * sd]], [[[(widen * sd) ** 2]]])


class TestRunIs2:
    def test_exact_likelihood(self, toy_model, toy_data):
        res, draws = run_is2(toy_model, toy_data, _g(toy_model, toy_data), PriorREProposals(3), M=4000,
                             rng=0, exact_likelihood=True, B=200)
        assert res.log_ml == pytest.approx(FROZEN["toy_log_marginal"], abs=4 * res.se)
        assert res.se < 0.01
        assert draws.M == 4000 and res.mean_var_loglik == 0.0

    def test_estimated_likelihood(self, toy_model, toy_data):
        res, draws = run_is2(toy_model, toy_data, _g(toy_model, toy_data), PriorREProposals(3),
                             ParticlePolicy("fixed", N0=20), M=3000, rng=1, B=200)
        assert abs(res.log_ml - FROZEN["toy_log_marginal"]) < 4 * res.se
        assert res.mean_var_loglik > 0
        np.testing.assert_array_equal(draws.N, 20)

    def test_exact_re_proposals(self, normal_model, normal_data):
        res, _ = run_is2(normal_model, normal_data, _g(normal_model, normal_data),
                         ExactNormalREProposals(normal_model, normal_data), ParticlePolicy("fixed", N0=2),
                         M=2000, rng=2, B=200)
        assert res.log_ml == pytest.approx(normal_model.conjugate_log_marginal(normal_data), abs=4 * res.se)

    def test_result_fields(self, toy_model, toy_data):
        res, draws = run_is2(toy_model, toy_data, _g(toy_model, toy_data), PriorREProposals(3),
                             ParticlePolicy(N0=16), M=200, rng=3, B=100)
        w = draws.normalized_weights()
        assert res.max_weight == pytest.approx(w.max())
        assert res.ess == pytest.approx(1 / np.sum(w ** 2))
        assert res.sum_sq_normalized == pytest.approx(np.sum(w ** 2))
        assert res.se == res.se_log_bootstrap
        assert res.n_zero_likelihood == 0
        stats = res.per_subject_N_stats()
        assert len(stats["mean_per_subject"]) == 3 and stats["min"] >= 16
        assert "log p(y)" in res.summary()

    def test_threads_do_not_change_result(self, normal_model, normal_data):
        args = (normal_model, normal_data, _g(normal_model, normal_data), PriorREProposals(normal_data.S),
                ParticlePolicy(N0=32))
        a, da = run_is2(*args, M=60, rng=RngStream(5), B=50, threads=1)
        b, db = run_is2(*args, M=60, rng=RngStream(5), B=50, threads=4)
        np.testing.assert_array_equal(da.log_w, db.log_w)
        assert a == b

    def test_antithetic_pairs_recorded(self, toy_model, toy_data):
        _, draws = run_is2(toy_model, toy_data, _g(toy_model, toy_data), PriorREProposals(3),
                           ParticlePolicy("fixed", N0=5), M=100, rng=0, antithetic=True, B=50)
        assert np.all(np.unique(draws.pair, return_counts=True)[1] == 2)

    def test_two_draws_is_enough(self, toy_model, toy_data):
        res, _ = run_is2(toy_model, toy_data, _g(toy_model, toy_data), PriorREProposals(3), M=2, rng=0, B=10)
        assert np.isfinite(res.log_ml)
        with pytest.raises(ValueError):
            run_is2(toy_model, toy_data, _g(toy_model, toy_data), PriorREProposals(3), M=1)

    def test_proposal_outside_support(self, toy_data):
        class Flat:
            d = 1

            def sample(self, M, gen, antithetic=False, stratified=True):
                return np.zeros((M, 1)), np.full(M, np.inf), np.arange(M)

        from marglik.models import NormalNormalModel
        with pytest.raises(NumericalError):
            run_is2(NormalNormalModel(), toy_data, Flat(), PriorREProposals(3), M=4)


class TestStandardErrors:
    def test_analytic_formula(self):
        lw = np.log([1.0, 2.0, 3.0, 4.0])
        w = np.array([1, 2, 3, 4]) / 10
        assert _analytic_se(lw) == pytest.approx(math.sqrt((4 * np.sum(w ** 2) - 1) / 4))
        assert _analytic_se(np.zeros(10)) == 0.0

    def test_bootstrap_agrees_with_delta_method(self):
        lw = np.random.default_rng(0).normal(0, 0.8, size=5000)
        assert bootstrap_se(lw, B=1000, rng=1) == pytest.approx(_analytic_se(lw), rel=0.1)

    def test_bootstrap_reproducible(self):
        lw = np.random.default_rng(0).normal(size=100)
        assert bootstrap_se(lw, B=100, rng=3) == bootstrap_se(lw, B=100, rng=3)
        with pytest.raises(ValueError):
            bootstrap_se(lw, B=1)

    def test_pairs_resampled_together(self):
        # perfectly anti-correlated pairs: every pair averages to the same value
        gen = np.random.default_rng(4)
        u = gen.uniform(-1, 1, size=500)
        lw = np.log(np.concatenate([1 + 0.5 * u, 1 - 0.5 * u]))
        pair = np.concatenate([np.arange(500), np.arange(500)])
        assert bootstrap_se(lw, B=200, rng=0, pair=pair) < 1e-12
        assert bootstrap_se(lw, B=200, rng=0) > 0.005


def _wd(theta, log_w):
    M = len(log_w)
    z = np.zeros(M)
    return WeightedDraws(np.asarray(theta, float).reshape(M, -1), np.asarray(log_w, float), z, z, z, z,
                         np.ones((M, 1), dtype=np.int64))


class TestExpectation:
    def test_weighted_mean(self):
        d = _wd([1.0, 2.0, 4.0], np.log([1.0, 1.0, 2.0]))
        r = posterior_expectation(d, lambda th: th[:, 0])
        assert r.estimate == pytest.approx((1 + 2 + 8) / 4)
        w = np.array([0.25, 0.25, 0.5])
        assert r.se == pytest.approx(math.sqrt(np.sum((np.array([1, 2, 4]) - 2.75) ** 2 * w ** 2)))

    def test_affine_equivariance(self, rng):
        d = _wd(rng.normal(size=50), rng.normal(size=50))
        base = posterior_expectation(d, lambda th: th[:, 0])
        r = posterior_expectation(d, lambda th: -3.0 * th[:, 0] + 7.0, "affine")
        assert r.estimate == pytest.approx(-3.0 * base.estimate + 7.0)
        assert r.se == pytest.approx(3.0 * base.se)
        assert r.descriptor == "affine"

    def test_per_row_callable(self):
        d = _wd([1.0, 3.0], [0.0, 0.0])
        assert posterior_expectation(d, lambda t: t.item() ** 2).estimate == pytest.approx(5.0)

    def test_non_finite_phi(self):
        d = _wd([1.0, -1.0], [0.0, 0.0])
        with pytest.raises(ValueError), np.errstate(invalid="ignore"):
            posterior_expectation(d, lambda th: np.log(th[:, 0]))

    def test_zero_weight_draws_ignored(self):
        d = _wd([1.0, -1.0], [0.0, -np.inf])
        with np.errstate(invalid="ignore"):
            assert posterior_expectation(d, lambda th: np.log(th[:, 0])).estimate == 0.0

    def test_posterior_mean_of_normal_model(self, toy_model, toy_data):
        _, draws = run_is2(toy_model, toy_data, _g(toy_model, toy_data), PriorREProposals(3), M=4000,
                           rng=7, exact_likelihood=True, B=10)
        r = posterior_expectation(draws, lambda th: th[:, 0])
        m, _ = toy_model.posterior_mu(toy_data)
        assert r.estimate == pytest.approx(m, abs=4 * r.se)


def test_weighted_draws_csv_roundtrip(tmp_path, toy_model, toy_data):
    _, draws = run_is2(toy_model, toy_data, _g(toy_model, toy_data), PriorREProposals(3),
                       ParticlePolicy("fixed", N0=3), M=20, rng=0, B=10, antithetic=True)
    path = tmp_path / "w.csv"
    draws.to_csv(path)
    back = WeightedDraws.from_csv(path)
    np.testing.assert_array_equal(back.theta, draws.theta)
    np.testing.assert_array_equal(back.log_w, draws.log_w)
    np.testing.assert_array_equal(back.pair, draws.pair)
    assert back.theta_names == ("mu",)
    assert back.N[:, 0].tolist() == draws.N.sum(axis=1).tolist()


def test_compare_models():
    a = Is2Result(-10.0, 0.1, 0.3, 50.0, 100, 1.0, 0.1, 0.02)
    b = Is2Result(-13.0, 0.1, 0.4, 50.0, 100, 1.0, 0.1, 0.02)
    log_bf, se = compare_models(a, b)
    assert log_bf == 3.0 and se == pytest.approx(0.5)
