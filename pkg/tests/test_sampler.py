import numpy as np
import pytest

from marglik.core import RngStream
from marglik.sampler import McmcConfig, read_draws, run_pm_mh, write_draws


def _batch_means_se(x, n_batches=20):
    b = np.array_split(x, n_batches)
    return np.std([v.mean() for v in b], ddof=1) / np.sqrt(n_batches)


@pytest.mark.parametrize("kw", [dict(burn_in=10, n_iter=10), dict(inner_N=0), dict(target_accept=1.0),
                                dict(method="hmc"), dict(thin=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        McmcConfig(**kw)


def test_pm_mh_recovers_posterior(toy_model, toy_data):
    cfg = McmcConfig(n_iter=6000, burn_in=1000, inner_N=50)
    draws = run_pm_mh(toy_model, toy_data, cfg, RngStream(0))
    mu = draws.theta_draws[:, 0]
    m, sd = toy_model.posterior_mu(toy_data)
    assert draws.n == 5000
    assert abs(mu.mean() - m) < 4 * _batch_means_se(mu) + 0.02
    assert mu.std() == pytest.approx(sd, rel=0.15)
    assert 0.05 < draws.info["acceptance_rate"] < 0.8
    assert draws.alpha_draws.shape == (5000, 3, 1)


def test_mwg_recovers_random_effects(normal_model, normal_data):
    cfg = McmcConfig(n_iter=3000, burn_in=500, method="mwg")
    draws = run_pm_mh(normal_model, normal_data, cfg, 1)
    m, _ = normal_model.posterior_mu(normal_data)
    assert draws.theta_draws[:, 0].mean() == pytest.approx(m, abs=0.05)
    np.testing.assert_allclose(draws.alpha_draws[:, :, 0].mean(axis=0),
                               normal_model.posterior_alpha_mean(normal_data), atol=0.06)


def test_chains_pool_and_thin(toy_model, toy_data):
    cfg = McmcConfig(n_iter=400, burn_in=100, n_chains=2, thin=3, inner_N=10)
    draws = run_pm_mh(toy_model, toy_data, cfg, 2)
    assert draws.n == 2 * 100
    assert len(draws.info["acceptance_rate_per_chain"]) == 2


def test_deterministic_and_thread_independent(toy_model, toy_data):
    cfg = McmcConfig(n_iter=300, burn_in=50, n_chains=2, inner_N=10)
    a = run_pm_mh(toy_model, toy_data, cfg, RngStream(3), threads=1)
    b = run_pm_mh(toy_model, toy_data, cfg, RngStream(3), threads=2)
    np.testing.assert_array_equal(a.theta_draws, b.theta_draws)
    np.testing.assert_array_equal(a.alpha_draws, b.alpha_draws)


def test_init_respected(toy_model, toy_data):
    cfg = McmcConfig(n_iter=2, burn_in=0, init=[5.0], inner_N=5, step_scale=1e-8)
    draws = run_pm_mh(toy_model, toy_data, cfg, 0)
    assert draws.theta_draws[0, 0] == pytest.approx(5.0, abs=1e-4)


def test_draws_roundtrip(tmp_path, toy_model, toy_data):
    draws = run_pm_mh(toy_model, toy_data, McmcConfig(n_iter=60, burn_in=10, inner_N=5), 0)
    path = tmp_path / "draws.csv"
    write_draws(draws, path)
    back = read_draws(path)
    np.testing.assert_array_equal(back.theta_draws, draws.theta_draws)
    np.testing.assert_array_equal(back.alpha_draws, draws.alpha_draws)
    assert back.theta_names == ("mu",) and back.subject_ids == ("s0", "s1", "s2")
    assert back.info["n_draws"] == 50 and back.info["seed"] == 0
    (tmp_path / "draws.csv.json").unlink()
    assert read_draws(path).info == {}
