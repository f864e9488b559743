"""Natural-gradient stochastic ascent on the variational lower bound.

Each iteration draws ``S`` parameter values from ``q_lambda`` (plain Monte
Carlo or a freshly scrambled Sobol' set), asks the estimator for one
unbiased log-likelihood gradient and value per draw, and moves ``lambda``
along the natural gradient with a decaying learning rate.  The run stops
when the windowed mean of the scaled lower bound stops moving.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .models import Model
from .natgrad import natural_gradient
from .variational import (
    LowerBoundEstimate,
    PriorSpec,
    VariationalParams,
    draw_thetas,
    lb_gradient_estimate,
    lower_bound_estimate,
    make_draws,
)

log = logging.getLogger(__name__)

# Estimator signature: (thetas (S, d), rng) -> (gradients (S, d), logliks (S,))
Estimator = Callable[[np.ndarray, np.random.Generator], tuple]

EPS_TRACTABLE = 1e-7
EPS_PANEL = 1e-5
INIT_FRACTION = 0.3


class MLENonConvergence(RuntimeError):
    """Newton ascent for the subsample MLE did not converge."""

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


class DivergenceError(FloatingPointError):
    """The variational parameters became non-finite."""


@dataclass
class OptimizerConfig:
    S: int = 256
    a0: float = 0.1
    tau: float = 50.0
    K: int = 5
    eps_stop: float = EPS_TRACTABLE
    max_iterations: int = 1000
    points: str = "MC"
    seed: int = 0
    natural: bool = True
    average: bool = False

    def __post_init__(self):
        if self.S < 1 or self.K < 1 or self.max_iterations < 1:
            raise ValueError("S, K and max_iterations must be positive")
        if not (self.eps_stop > 0 and self.a0 > 0 and self.tau > 0):
            raise ValueError("eps_stop, a0 and tau must be positive")
        self.points = self.points.upper()
        if self.points == "RQMC" and self.S & (self.S - 1):
            raise ValueError("RQMC needs S to be a power of 2")


@dataclass
class TracePoint:
    iteration: int
    lam: VariationalParams
    lb: LowerBoundEstimate
    grad_norm: float
    step_norm: float
    wall_time: float

    def record(self) -> dict:
        digest = hashlib.sha256(self.lam.flat().astype("<f8").tobytes()).hexdigest()[:16]
        return {
            "iteration": self.iteration,
            "scaled_lb": self.lb.scaled_value,
            "lb": self.lb.value,
            "grad_norm": self.grad_norm,
            "step_norm": self.step_norm,
            "wall_time": self.wall_time,
            "lambda_digest": digest,
        }


@dataclass
class FitResult:
    lam: VariationalParams
    trace: list[TracePoint] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.trace)


def learning_rate(t, a0: float = 0.1, tau: float = 50.0):
    """``a_t = a0 * tau / (tau + t)``."""
    return a0 * tau / (tau + np.asarray(t, dtype=float))


def stopping_check(trace: Sequence, K: int = 5, eps_stop: float = EPS_TRACTABLE) -> bool:
    """True once the means of the last two ``K``-windows of scaled LB differ by < ``eps_stop``.

    ``trace`` holds trace points or plain scaled lower-bound values.
    """
    if len(trace) < 2 * K:
        return False
    vals = np.array([p.lb.scaled_value if isinstance(p, TracePoint) else float(p) for p in trace[-2 * K :]])
    return bool(abs(vals[K:].mean() - vals[:K].mean()) < eps_stop)


def _lambda_window_check(lams: Sequence[VariationalParams], K: int, eps_stop: float) -> bool:
    if len(lams) < 2 * K:
        return False
    flat = np.array([lam.flat() for lam in lams[-2 * K :]])
    return bool(np.max(np.abs(flat[K:].mean(axis=0) - flat[:K].mean(axis=0))) < eps_stop)


# ------------------------------------------------------------ initialization


def _repair(info: np.ndarray) -> np.ndarray:
    info = 0.5 * (info + info.T)
    try:
        np.linalg.cholesky(info)
        return info
    except np.linalg.LinAlgError:
        d = info.shape[0]
        ridge = 1e-6 * abs(np.trace(info)) / d
        log.warning("observed information is not positive definite; adding ridge %.3g", ridge)
        for _ in range(60):
            cand = info + ridge * np.eye(d)
            try:
                np.linalg.cholesky(cand)
                return cand
            except np.linalg.LinAlgError:
                ridge *= 10.0
        raise


def subsample_mle(model: Model, subset=None, theta0=None, max_iter: int = 100, tol: float = 1e-8):
    """Newton ascent with step halving on the (subsample) log-likelihood.

    Returns ``(theta_hat, information)`` with information the negative
    Hessian at ``theta_hat``.  Raises :class:`MLENonConvergence` when the
    gradient tolerance is not reached or the maximizer runs off to infinity.
    """
    sub = model if subset is None else model.subset(subset)
    if sub.n == 0:
        raise ValueError("empty subsample")
    d = sub.dim
    theta = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    f = sub.loglik(theta)
    if not np.isfinite(f):
        raise MLENonConvergence("log-likelihood is not finite at the starting value", theta)
    for it in range(max_iter):
        g = sub.grad(theta)
        gnorm = float(np.linalg.norm(g))
        raw = -sub.hess(theta)
        try:
            info = _repair(raw)
            step = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            raise MLENonConvergence(
                "observed information vanished (maximizer at infinity, e.g. separable data)", theta
            ) from None
        # a small gradient alone is not enough: on separable data the gradient and the
        # curvature vanish together while the Newton step stays order one
        if gnorm < tol and np.linalg.norm(step) <= 1e-6 * (1.0 + np.linalg.norm(theta)):
            w = np.linalg.eigvalsh(0.5 * (raw + raw.T))
            if w[-1] <= 0 or w[0] < 1e-10 * w[-1]:
                raise MLENonConvergence(
                    "log-likelihood is flat at the optimum (maximizer at infinity, e.g. separable data)", theta
                )
            return theta, info
        t = 1.0
        for _ in range(50):
            cand = theta + t * step
            fc = sub.loglik(cand)
            # near the optimum the gain can fall below rounding of f
            if np.isfinite(fc) and fc >= f - 1e-12 * (1.0 + abs(f)):
                break
            t *= 0.5
        else:
            raise MLENonConvergence(f"step halving failed at iteration {it}", theta)
        theta, f = cand, fc
        if np.linalg.norm(theta) > 1e6:
            raise MLENonConvergence("iterates diverge (maximizer at infinity, e.g. separable data)", theta)
    raise MLENonConvergence(f"no convergence in {max_iter} Newton iterations (|grad| = {gnorm:.3e})", theta)


def init_lambda(theta_hat, information, n: int, n_sub: int) -> VariationalParams:
    """Factor approximation of the scaled inverse information.

    ``Sigma = (n_sub / n) information^-1``, ``B = sqrt(nu_1) v_1`` from the
    top eigenpair and ``c^2`` the mean diagonal of ``Sigma - BB'``.  When that
    residual vanishes (``d = 1``) ``c^2`` is floored at 1% of the mean
    variance so the family stays non-degenerate.
    """
    info = np.asarray(information, dtype=float)
    info = 0.5 * (info + info.T)
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise ValueError("information matrix must be positive definite") from exc
    Sigma = np.linalg.inv(info * (n / n_sub))
    Sigma = 0.5 * (Sigma + Sigma.T)
    nu, V = np.linalg.eigh(Sigma)
    v = V[:, -1]
    v = v * np.sign(v[np.argmax(np.abs(v))])
    B = np.sqrt(nu[-1]) * v
    c2 = float(np.mean(np.diag(Sigma) - B * B))
    c2 = max(c2, 1e-2 * float(np.mean(np.diag(Sigma))))
    return VariationalParams(np.asarray(theta_hat, dtype=float), B, np.sqrt(c2))


def init_subset(n: int, rng: np.random.Generator, fraction: float = INIT_FRACTION) -> np.ndarray:
    k = max(1, int(round(fraction * n)))
    return np.sort(rng.choice(n, size=k, replace=False))


# ------------------------------------------------------------------- fitting


def vbill_fit(
    estimator: Estimator,
    lam0: VariationalParams,
    prior: PriorSpec,
    n: int,
    config: OptimizerConfig,
    callback: Callable[[TracePoint], None] | None = None,
) -> FitResult:
    """Run the natural-gradient ascent from ``lam0``.

    ``estimator(thetas, rng)`` returns unbiased gradient estimates and
    log-likelihood estimates for each row of ``thetas``.  With
    ``config.natural`` false the raw gradient is used (for comparisons).
    """
    lam = lam0
    d = lam.dim
    root = np.random.SeedSequence(config.seed)
    trace: list[TracePoint] = []
    lams: list[VariationalParams] = []
    t0 = time.perf_counter()
    converged = False
    for t in range(config.max_iterations):
        child = root.spawn(1)[0]
        draw_seed, est_seed = child.generate_state(2)
        draws = make_draws(d, config.S, config.points, seed=int(draw_seed))
        thetas = draw_thetas(lam, draws)
        G, ll = estimator(thetas, np.random.default_rng(int(est_seed)))
        grad = lb_gradient_estimate(lam, draws, G, prior)
        lb = lower_bound_estimate(lam, ll, prior, n, t)
        direction = natural_gradient(lam, grad) if config.natural else grad
        step = learning_rate(t, config.a0, config.tau) * direction
        point = TracePoint(
            t, lam, lb, float(np.linalg.norm(grad)), float(np.linalg.norm(step)), time.perf_counter() - t0
        )
        trace.append(point)
        if callback is not None:
            callback(point)
        new = lam.flat() + step
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"non-finite variational parameters at iteration {t}")
        lam = VariationalParams.from_flat(new)
        lams.append(lam)
        if config.average:
            if _lambda_window_check(lams, config.K, config.eps_stop):
                converged = True
                break
        elif stopping_check(trace, config.K, config.eps_stop):
            converged = True
            break
    if config.average and lams:
        k = min(config.K, len(lams))
        lam = VariationalParams.from_flat(np.mean([x.flat() for x in lams[-k:]], axis=0))
    if not converged:
        log.warning("stopping rule not met after %d iterations", config.max_iterations)
    return FitResult(lam, trace, converged)


def exact_estimator(model: Model, batch: int = 64) -> Estimator:
    """Full-data gradients and log-likelihoods (no subsampling)."""

    def est(thetas, rng):
        thetas = np.atleast_2d(thetas)
        G = np.empty_like(thetas)
        ll = np.empty(thetas.shape[0])
        for s, th in enumerate(thetas):
            G[s] = model.grad(th)
            ll[s] = model.loglik(th)
        return G, ll

    return est


def write_trace(trace: Sequence[TracePoint], path) -> None:
    """Line-delimited JSON trace records."""
    with open(path, "w") as fh:
        for p in trace:
            fh.write(json.dumps(p.record()) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
