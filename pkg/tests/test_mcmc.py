import numpy as np
import pytest

from vbill import mcmc
from vbill.mcmc import ChainConfig, ChainOutput, adaptive_rw_mh, batch_means_se, pmmh, read_draws, tune_is_samples, write_draws
from vbill.models import ConjugateGaussianModel
from vbill.variational import PriorSpec


def gaussian_target(d, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d))
    cov = A @ A.T / d + 0.1 * np.eye(d)
    prec = np.linalg.inv(cov)
    mean = rng.normal(size=d)
    return (lambda th: -0.5 * (th - mean) @ prec @ (th - mean)), mean, cov


@pytest.mark.parametrize("d", [2, 4, 12])
def test_acceptance_rate_after_adaptation(d):
    logp, mean, cov = gaussian_target(d, seed=d)
    out = adaptive_rw_mh(logp, d, ChainConfig(iterations=30000, burn_in=10000, theta0=mean, seed=1))
    assert 0.1 <= out.acceptance_rate <= 0.5
    se = out.batch_means_se()
    assert np.all(np.abs(out.mean - mean) < 5 * se)
    np.testing.assert_allclose(out.sd, np.sqrt(np.diag(cov)), rtol=0.15)


def test_chain_reproducible_under_fixed_seed():
    logp, mean, _ = gaussian_target(3)
    cfg = ChainConfig(iterations=3000, burn_in=1000, theta0=mean, seed=7)
    a = adaptive_rw_mh(logp, 3, cfg)
    b = adaptive_rw_mh(logp, 3, cfg)
    assert np.array_equal(a.draws, b.draws) and a.acceptance_rate == b.acceptance_rate
    c = adaptive_rw_mh(logp, 3, ChainConfig(iterations=3000, burn_in=1000, theta0=mean, seed=8))
    assert not np.array_equal(a.draws, c.draws)


def test_initial_covariance_is_used_before_adaptation():
    # a target with sd 1e-3 is hopeless for the default 0.1 step but easy with the right init_cov
    d = 2
    logp = lambda th: -0.5 * np.sum(th**2) / 1e-6
    cfg = ChainConfig(iterations=900, burn_in=100, adapt_start=1000, seed=0)
    cold = adaptive_rw_mh(logp, d, cfg)
    warm = adaptive_rw_mh(logp, d, cfg, init_cov=1e-6 * np.eye(d))
    assert cold.acceptance_rate < 0.05
    assert 0.1 < warm.acceptance_rate < 0.6


def _conjugate(n=40, d=2):
    rng = np.random.default_rng(3)
    return ConjugateGaussianModel(rng.normal(size=(n, d)) + np.array([1.0, -0.5])), PriorSpec(10.0)


def test_pmmh_matches_exact_mh_on_conjugate_model():
    model, prior = _conjugate()
    d = model.dim
    mean, cov = model.posterior(prior.variance)
    logprior = lambda th: float(prior.logpdf(th))
    cfg = ChainConfig(iterations=60000, burn_in=10000, theta0=mean, seed=2)
    exact = adaptive_rw_mh(lambda th: model.loglik(th) + logprior(th), d, cfg, init_cov=cov)

    sigma = 1.0

    def noisy(th, rng):
        # log-normal noise with E[exp(.)] = 1, so the likelihood estimate is unbiased and var(log L_hat) = 1
        return model.loglik(th) + sigma * rng.standard_normal() - 0.5 * sigma**2

    pm = pmmh(noisy, logprior, d, ChainConfig(iterations=60000, burn_in=10000, theta0=mean, seed=3), init_cov=cov)
    joint = np.sqrt(exact.batch_means_se() ** 2 + pm.batch_means_se() ** 2)
    assert np.all(np.abs(exact.mean - pm.mean) < 3 * joint)
    np.testing.assert_allclose(exact.mean, mean, atol=5 * exact.batch_means_se().max())
    np.testing.assert_allclose(pm.sd, np.sqrt(np.diag(cov)), rtol=0.1)
    assert pm.acceptance_rate < exact.acceptance_rate


def test_pmmh_never_refreshes_current_estimate():
    calls = []

    def est(th, rng):
        calls.append(th.copy())
        return 0.0

    out = pmmh(est, lambda th: -0.5 * th @ th, 1, ChainConfig(iterations=50, burn_in=10, seed=0))
    # one evaluation at the start plus exactly one per proposal
    assert len(calls) == 51
    assert out.draws.shape == (40, 1)


def test_tune_is_samples_finds_smallest_sufficient_power_of_two():
    def est(theta, N, rng):
        return rng.normal(scale=np.sqrt(6.0 / N))

    assert tune_is_samples(est, np.zeros(1), seed=0) == 8
    assert tune_is_samples(est, np.zeros(1), target_var=0.1, seed=0) == 64
    assert tune_is_samples(est, np.zeros(1), target_var=1e-9, seed=0, n_max=32) == 32


def test_batch_means_se_for_iid_and_correlated_draws():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40000, 2))
    se = batch_means_se(x)
    np.testing.assert_allclose(se, 1 / np.sqrt(40000), rtol=0.2)
    # AR(1) with phi = 0.9: long-run variance factor (1 + phi) / (1 - phi) = 19
    phi = 0.9
    e = rng.normal(size=200000)
    ar = np.empty_like(e)
    ar[0] = e[0]
    for t in range(1, e.size):
        ar[t] = phi * ar[t - 1] + e[t]
    expected = np.sqrt(19 / (1 - phi**2) / e.size)
    assert batch_means_se(ar[:, None])[0] == pytest.approx(expected, rel=0.25)
    with pytest.raises(ValueError):
        batch_means_se(np.zeros((1, 1)), batches=2)


def test_draws_round_trip(tmp_path):
    out = ChainOutput(np.random.default_rng(0).normal(size=(25, 3)), 0.23, 5, 11)
    path = tmp_path / "draws.f8"
    write_draws(out, path)
    assert path.stat().st_size == 25 * 3 * 8
    header = (tmp_path / "draws.f8.hdr").read_text().split("\n")
    assert header[:4] == ["d 3", "iterations 30", "burn_in 5", "seed 11"]
    back = read_draws(path)
    np.testing.assert_array_equal(back.draws, out.draws)
    assert back.acceptance_rate == 0.23 and back.burn_in == 5 and back.seed == 11
    path.write_bytes(path.read_bytes()[:-24])
    with pytest.raises(ValueError):
        read_draws(path)


def test_config_validation_and_bad_start():
    with pytest.raises(ValueError):
        ChainConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        adaptive_rw_mh(lambda th: -np.inf, 1, ChainConfig(iterations=10, burn_in=0))
    assert mcmc.SCALE == pytest.approx(2.38**2)
