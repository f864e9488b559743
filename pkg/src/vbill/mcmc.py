"""Reference samplers: adaptive random-walk Metropolis and pseudo-marginal MH.

The proposal is Gaussian with covariance ``(2.38^2 / d) (C_t + eps I)`` where
``C_t`` is the running covariance of the chain history, switched on after a
fixed number of iterations.  The pseudo-marginal sampler carries a noisy
log-likelihood estimate with the state and freezes adaptation at the end of
burn-in.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

SCALE = 2.38**2
ADAPT_EPS = 1e-6
ADAPT_START = 1000
# Proposal standard deviation per coordinate before adaptation starts.
INITIAL_STEP = 0.1
MAX_IS_SAMPLES = 1 << 16


@dataclass
class ChainConfig:
    """``iterations`` counts every step, burn-in included."""

    iterations: int = 40000
    burn_in: int = 10000
    theta0: np.ndarray | None = None
    adapt_start: int = ADAPT_START
    seed: int = 0
    freeze_at: int | None = None

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn-in must be smaller than the number of iterations")


@dataclass
class ChainOutput:
    draws: np.ndarray
    acceptance_rate: float
    burn_in: int
    seed: int

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1)

    def batch_means_se(self, batches: int | None = None) -> np.ndarray:
        return batch_means_se(self.draws, batches)


def batch_means_se(draws, batches: int | None = None) -> np.ndarray:
    """Monte Carlo standard error of the chain mean by non-overlapping batch means."""
    x = np.asarray(draws, dtype=float)
    n = x.shape[0]
    b = batches or max(2, int(math.sqrt(n)))
    size = n // b
    if size < 1:
        raise ValueError("chain too short for batch means")
    means = x[: b * size].reshape(b, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(b)


class _RunningMoments:
    def __init__(self, d):
        self.k = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros((d, d))

    def push(self, x):
        self.k += 1
        delta = x - self.mean
        self.mean += delta / self.k
        self.m2 += np.outer(delta, x - self.mean)

    @property
    def cov(self):
        return self.m2 / max(self.k - 1, 1)


def _run(evaluate, log_prior, config: ChainConfig, d: int, init_cov=None, noisy=False) -> ChainOutput:
    rng = np.random.default_rng(config.seed)
    theta = np.zeros(d) if config.theta0 is None else np.asarray(config.theta0, dtype=float).copy()
    ll = evaluate(theta, rng)
    lp = log_prior(theta)
    if not np.isfinite(ll + lp):
        raise ValueError("log target is not finite at the initial value")
    if init_cov is None:
        chol0 = INITIAL_STEP / math.sqrt(d) * np.eye(d)
    else:
        chol0 = np.linalg.cholesky(SCALE / d * (np.asarray(init_cov, dtype=float) + ADAPT_EPS * np.eye(d)))
    chol = chol0
    moments = _RunningMoments(d)
    keep = config.iterations - config.burn_in
    out = np.empty((keep, d))
    accepted = 0
    freeze = config.freeze_at if config.freeze_at is not None else config.iterations
    for it in range(config.iterations):
        prop = theta + chol @ rng.standard_normal(d)
        lp_prop = log_prior(prop)
        if np.isfinite(lp_prop):
            ll_prop = evaluate(prop, rng)
            log_ratio = ll_prop + lp_prop - ll - lp
            if np.log(rng.random()) < log_ratio:
                theta, ll, lp = prop, ll_prop, lp_prop
                if it >= config.burn_in:
                    accepted += 1
        else:
            rng.random()
        moments.push(theta)
        if config.adapt_start <= it < freeze:
            try:
                chol = np.linalg.cholesky(SCALE / d * (moments.cov + ADAPT_EPS * np.eye(d)))
            except np.linalg.LinAlgError:
                chol = chol0
        if it >= config.burn_in:
            out[it - config.burn_in] = theta
    return ChainOutput(out, accepted / keep, config.burn_in, config.seed)


def adaptive_rw_mh(
    log_target: Callable[[np.ndarray], float], d: int, config: ChainConfig, init_cov=None
) -> ChainOutput:
    """Adaptive random-walk Metropolis on an exact log target."""
    return _run(lambda th, rng: float(log_target(th)), lambda th: 0.0, config, d, init_cov)


def pmmh(
    loglik_estimator: Callable[[np.ndarray, np.random.Generator], float],
    log_prior: Callable[[np.ndarray], float],
    d: int,
    config: ChainConfig,
    init_cov=None,
) -> ChainOutput:
    """Pseudo-marginal MH: the estimate at the current state is never refreshed.

    Adaptation stops at the end of burn-in unless ``config.freeze_at`` says
    otherwise.
    """
    if config.freeze_at is None:
        config = ChainConfig(
            config.iterations, config.burn_in, config.theta0, config.adapt_start, config.seed, config.burn_in
        )
    return _run(loglik_estimator, log_prior, config, d, init_cov, noisy=True)


def tune_is_samples(
    loglik_estimator: Callable[[np.ndarray, int, np.random.Generator], float],
    theta_bar,
    target_var: float = 1.0,
    replications: int = 50,
    seed=0,
    n_min: int = 2,
    n_max: int = MAX_IS_SAMPLES,
) -> int:
    """Smallest power of 2 with ``var(log L_hat(theta_bar)) <= target_var``.

    ``loglik_estimator(theta, N, rng)`` returns one total log-likelihood
    estimate using ``N`` importance samples per unit.
    """
    rng = np.random.default_rng(seed)
    N = n_min
    while True:
        vals = np.array([loglik_estimator(theta_bar, N, rng) for _ in range(replications)])
        var = vals.var(ddof=1)
        log.info("N=%d: var(log L_hat) = %.3f", N, var)
        if var <= target_var:
            return N
        if N >= n_max:
            log.warning("variance %.3f still above target at the cap N=%d", var, N)
            return N
        N *= 2


def write_draws(output: ChainOutput, path, header_path=None) -> None:
    """Row-major little-endian float64 draws plus a ``key value`` text header."""
    output.draws.astype("<f8").tofile(path)
    header_path = header_path or str(path) + ".hdr"
    n, d = output.draws.shape
    with open(header_path, "w") as fh:
        fh.write(f"d {d}\n")
        fh.write(f"iterations {n + output.burn_in}\n")
        fh.write(f"burn_in {output.burn_in}\n")
        fh.write(f"seed {output.seed}\n")
        fh.write(f"acceptance_rate {output.acceptance_rate!r}\n")


def read_draws(path, header_path=None) -> ChainOutput:
    header_path = header_path or str(path) + ".hdr"
    meta = {}
    with open(header_path) as fh:
        for line in fh:
            if line.strip():
                k, v = line.split(None, 1)
                meta[k] = v.strip()
    d = int(meta["d"])
    draws = np.fromfile(path, dtype="<f8").astype(float).reshape(-1, d)
    expected = int(meta["iterations"]) - int(meta["burn_in"])
    if draws.shape[0] != expected:
        raise ValueError(f"{path}: expected {expected} draws, found {draws.shape[0]}")
    return ChainOutput(draws, float(meta.get("acceptance_rate", "nan")), int(meta["burn_in"]), int(meta["seed"]))
