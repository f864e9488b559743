"""End-to-end fits shared by the command line and the experiment scripts."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import mcmc
from .fisher_identity import (
    ISConfig,
    ISSource,
    SimulatedLikelihood,
    build_panel_control_variates,
    loglik_estimate,
)
from .models import LatentUnitModel, Model
from .optimizer import (
    EPS_PANEL,
    EPS_TRACTABLE,
    FitResult,
    OptimizerConfig,
    init_lambda,
    init_subset,
    subsample_mle,
    vbill_fit,
)
from .subsample import ControlVariateCache, SubsampledGradient, build_control_variates
from .variational import PriorSpec, VariationalParams

log = logging.getLogger(__name__)

# Importance samples for the simulated-likelihood initialization.
INIT_IS_SAMPLES = 256


@dataclass
class VBILLRun:
    fit: FitResult
    lam0: VariationalParams
    theta_bar: np.ndarray
    cache: ControlVariateCache

    @property
    def lam(self) -> VariationalParams:
        return self.fit.lam


def simulated_mle(model: LatentUnitModel, units, seed=0, rounds: int = 2, N: int = INIT_IS_SAMPLES):
    """Maximize a frozen-draw simulated likelihood over ``units``.

    Proposals are re-centred at the previous maximizer between rounds.
    """
    theta = np.zeros(model.dim)
    info = None
    for r in range(rounds):
        sim = SimulatedLikelihood(model, theta, ISConfig(N=N), seed=(seed, r), units=units)
        theta, info = subsample_mle(sim, theta0=theta)
    return theta, info


def central_value(model: Model, seed=0, fraction: float = 0.3, subset=None):
    """Subsample MLE used both for the control variates and the initial ``lambda``."""
    rng = np.random.default_rng(seed)
    if subset is None:
        subset = init_subset(model.n, rng, fraction)
    if isinstance(model, LatentUnitModel) and not model.tractable:
        theta, info = simulated_mle(model, subset, seed=seed)
    else:
        theta, info = subsample_mle(model, subset)
    return theta, info, subset.size


def run_vbill(
    model: Model,
    m: int,
    config: OptimizerConfig | None = None,
    prior: PriorSpec | None = None,
    is_config: ISConfig | None = None,
    init_seed=0,
    chunk_sizes=None,
    source: Model | None = None,
    central=None,
    cache: ControlVariateCache | None = None,
) -> VBILLRun:
    """Initialize, build control variates and run the ascent.

    ``source`` overrides where unit contributions come from (e.g. a chunk
    store); ``central`` passes a precomputed ``(theta_bar, information, n_sub)``.
    """
    prior = prior or PriorSpec()
    latent = isinstance(model, LatentUnitModel) and not model.tractable
    if config is None:
        config = OptimizerConfig(eps_stop=EPS_PANEL if latent else EPS_TRACTABLE)
    theta_bar, info, n_sub = central if central is not None else central_value(model, seed=init_seed)
    lam0 = init_lambda(theta_bar, info, model.n, n_sub)
    if latent:
        if cache is None:
            cache = build_panel_control_variates(model, theta_bar, seed=init_seed)
        src = ISSource(model, is_config or ISConfig(), np.random.default_rng([config.seed, 1]))
        est = SubsampledGradient(src, cache, m, chunk_sizes=chunk_sizes, batch=max(1, 4096 // m))
    else:
        if cache is None:
            cache = build_control_variates(model, theta_bar)
        est = SubsampledGradient(source or model, cache, m, chunk_sizes=chunk_sizes)
    fit = vbill_fit(est, lam0, prior, model.n, config)
    return VBILLRun(fit, lam0, theta_bar, cache)


def log_prior_fn(prior: PriorSpec):
    return lambda th: float(prior.logpdf(th))


def run_mcmc(
    model: Model,
    prior: PriorSpec | None = None,
    config: mcmc.ChainConfig | None = None,
    is_config: ISConfig | None = None,
    central=None,
    tune_seed=0,
):
    """Adaptive MH for tractable models, PMMH with tuned ``N`` otherwise.

    The chain starts at the subsample MLE with the scaled inverse
    information as the initial proposal covariance.  Returns the chain and
    the number of importance samples used (``None`` when exact).
    """
    prior = prior or PriorSpec()
    config = config or mcmc.ChainConfig()
    theta_bar, info, n_sub = central if central is not None else central_value(model, seed=tune_seed)
    init_cov = np.linalg.inv(info * (model.n / n_sub))
    cfg = mcmc.ChainConfig(config.iterations, config.burn_in, theta_bar, config.adapt_start, config.seed, config.freeze_at)
    if isinstance(model, LatentUnitModel) and not model.tractable:
        base = is_config or ISConfig()

        def est(theta, N, rng):
            return loglik_estimate(model, theta, ISConfig(N, base.proposal, base.points), rng)

        N = mcmc.tune_is_samples(est, theta_bar, seed=tune_seed)
        chosen = ISConfig(N, base.proposal, base.points)
        chain = mcmc.pmmh(
            lambda th, rng: loglik_estimate(model, th, chosen, rng), log_prior_fn(prior), model.dim, cfg, init_cov
        )
        return chain, N
    lp = log_prior_fn(prior)
    chain = mcmc.adaptive_rw_mh(lambda th: model.loglik(th) + lp(th), model.dim, cfg, init_cov)
    return chain, None
