"""Importance-sampling estimates for models with a scalar latent effect per unit.

A unit's likelihood ``p(y_i | theta)`` integrates ``p(y_i, alpha | theta)``
over ``alpha``.  With a Gaussian proposal ``q`` and draws ``alpha_j ~ q``::

    L_i  ~  (1/N) sum_j p(y_i, alpha_j | theta) / q(alpha_j)
    g_i  ~  sum_j w_j grad_theta log p(y_i, alpha_j | theta),   w_j ∝ p/q

The level estimate ``L_i`` is unbiased; the gradient uses self-normalized
weights (Fisher's identity), which is consistent with O(1/N) bias.
All routines are vectorized across units and draws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import rqmc
from .models import LOG_2PI, LatentUnitModel, Model, _as_theta
from .subsample import (
    ControlVariateCache,
    GradientEstimate,
    SubsamplePlan,
    _exact_colsum,
    estimate_gradient,
)

log = logging.getLogger(__name__)

PRIOR = "PRIOR"
LAPLACE = "LAPLACE"
NEWTON_STEPS = 50
NEWTON_TOL = 1e-10
# Largest number of (unit, draw, time) elements evaluated in one block.
BLOCK_ELEMENTS = 1 << 21
# Importance samples and relative step for control-variate Hessians.
CV_SAMPLES = 1 << 10
FD_STEP = 1e-4


class WeightUnderflow(FloatingPointError):
    """Every importance weight of some unit is zero or non-finite."""


@dataclass(frozen=True)
class ISConfig:
    N: int = 256
    proposal: str = LAPLACE
    points: str = "RQMC"

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need at least two importance samples")
        object.__setattr__(self, "proposal", self.proposal.upper())
        object.__setattr__(self, "points", self.points.upper())
        if self.proposal not in (PRIOR, LAPLACE):
            raise ValueError(f"unknown proposal {self.proposal!r}")
        if self.points not in ("MC", "RQMC"):
            raise ValueError(f"unknown point source {self.points!r}")
        if self.points == "RQMC" and self.N & (self.N - 1):
            raise ValueError("RQMC importance sampling needs N to be a power of 2")


@dataclass(frozen=True)
class LatentProposal:
    """Gaussian proposal(s) over the latent effect; arrays give one per unit."""

    location: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.location, dtype=float)
        sc = np.asarray(self.scale, dtype=float)
        if not (np.all(np.isfinite(sc)) and np.all(sc > 0)):
            raise ValueError("proposal scale must be finite and positive")
        if not np.all(np.isfinite(loc)):
            raise ValueError("proposal location must be finite")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "scale", sc)


def _require_latent(model):
    if not isinstance(model, LatentUnitModel):
        raise TypeError(f"{type(model).__name__} has no latent-effect structure")


def build_proposals(model: LatentUnitModel, units, thetas, kind: str = LAPLACE) -> LatentProposal:
    """Proposals for ``units`` (k,) at per-unit parameters ``thetas`` (k, d).

    LAPLACE centres on the mode of ``alpha -> log p(y_i, alpha | theta)``
    (Newton from 0) with scale ``(-second derivative)^(-1/2)``; units where
    Newton fails to converge in 50 steps fall back to the prior.
    """
    _require_latent(model)
    units = np.asarray(units, dtype=np.int64)
    thetas = np.asarray(thetas, dtype=float)
    prior_scale = np.exp(0.5 * model.latent_prior_logvar(thetas))
    if kind.upper() == PRIOR:
        return LatentProposal(np.zeros(units.size), prior_scale)
    if kind.upper() != LAPLACE:
        raise ValueError(f"unknown proposal {kind!r}")
    alpha = np.zeros(units.size)
    done = np.zeros(units.size, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(NEWTON_STEPS):
            d1, d2 = model.latent_derivatives(units, thetas, alpha)
            step = np.where(d2 < 0, d1 / d2, 0.0)
            alpha = np.where(done, alpha, alpha - step)
            done |= np.abs(step) < NEWTON_TOL * (1.0 + np.abs(alpha))
            if done.all():
                break
        _, d2 = model.latent_derivatives(units, thetas, alpha)
        scale = 1.0 / np.sqrt(-d2)
    ok = done & np.isfinite(alpha) & (d2 < 0) & np.isfinite(scale)
    if not ok.all():
        log.warning("Laplace proposal fell back to the prior for %d unit(s)", int((~ok).sum()))
    return LatentProposal(np.where(ok, alpha, 0.0), np.where(ok, scale, prior_scale))


def build_proposal(model: LatentUnitModel, i: int, theta, kind: str = LAPLACE) -> LatentProposal:
    """Scalar proposal for a single unit."""
    idx = model._check_index(np.asarray([i]))
    theta = _as_theta(theta, model.dim)
    p = build_proposals(model, idx, theta[None, :], kind)
    return LatentProposal(p.location[0], p.scale[0])


def standard_points(k: int, N: int, source: str, rng: np.random.Generator) -> np.ndarray:
    """``(k, N)`` standard-normal draws; RQMC scrambles each row independently."""
    if source.upper() == "MC":
        return rng.standard_normal((k, N))
    if k == 0:
        return np.zeros((0, N))
    return rqmc.to_normal(rqmc.scrambled_batches(k, 1, N, rng)[..., 0])


def importance_weights(model: LatentUnitModel, units, thetas, prop: LatentProposal, Z):
    """Self-normalized weights for latent draws ``alpha = location + scale * Z``.

    Returns ``(weights, loglik, alpha, saved)``: weights of shape ``(k, N)``
    summing to one per unit, the log of the unbiased likelihood estimate per
    unit, the latent draws and model intermediates reused for the score.
    """
    alpha = prop.location[:, None] + prop.scale[:, None] * Z
    lp, saved = model.joint_loglik_saving(units, thetas, alpha)
    logq = -0.5 * (LOG_2PI + Z * Z) - np.log(prop.scale)[:, None]
    lw = lp - logq
    mx = np.max(lw, axis=1)
    bad = ~np.isfinite(mx)
    if bad.any():
        j = int(np.argmax(bad))
        raise WeightUnderflow(
            f"all importance weights vanish for unit {int(units[j])} "
            f"(proposal location {prop.location[j]:.4g}, scale {prop.scale[j]:.4g})"
        )
    w = np.exp(lw - mx[:, None])
    s = w.sum(axis=1)
    ll = mx + np.log(s / Z.shape[1])
    return w / s[:, None], ll, alpha, saved


def _is_block(model, units, thetas, prop: LatentProposal, Z, with_grad=True):
    w, ll, alpha, saved = importance_weights(model, units, thetas, prop, Z)
    if not with_grad:
        return ll, None
    return ll, model.weighted_score_saved(units, thetas, alpha, w, saved)


def is_estimates(model: LatentUnitModel, units, thetas, config: ISConfig, rng=None, Z=None, proposal=None, with_grad=True):
    """Log-likelihood and gradient estimates for many units at once.

    ``thetas`` has shape ``(k, d)`` (one parameter per unit).  ``Z`` may pass
    fixed standard-normal draws ``(k, N)``; ``proposal`` a fixed proposal.
    """
    _require_latent(model)
    units = np.asarray(units, dtype=np.int64).reshape(-1)
    thetas = np.asarray(thetas, dtype=float).reshape(units.size, model.dim)
    k = units.size
    if proposal is None:
        proposal = build_proposals(model, units, thetas, config.proposal)
    if Z is None:
        Z = standard_points(k, config.N, config.points, rng if rng is not None else np.random.default_rng())
    T = max(int(np.max(model.unit_sizes(units[:1]))) if k else 1, 1)
    step = max(1, BLOCK_ELEMENTS // (Z.shape[1] * T))
    ll = np.empty(k)
    g = np.empty((k, model.dim)) if with_grad else None
    for a in range(0, k, step):
        sl = slice(a, min(a + step, k))
        sub = LatentProposal(proposal.location[sl], proposal.scale[sl])
        l_b, g_b = _is_block(model, units[sl], thetas[sl], sub, Z[sl], with_grad)
        ll[sl] = l_b
        if with_grad:
            g[sl] = g_b
    return ll, g


def _single(model, i, theta, config, points, rng, proposal):
    idx = model._check_index(np.asarray([i]))
    theta = _as_theta(theta, model.dim)
    if points is not None:
        Z = np.asarray(points.points if isinstance(points, rqmc.PointBatch) else points, dtype=float)
        if isinstance(points, rqmc.PointBatch):
            Z = rqmc.to_normal(Z)
        Z = Z.reshape(1, -1)
    else:
        Z = None
    prop = None
    if proposal is not None:
        prop = LatentProposal(np.atleast_1d(proposal.location), np.atleast_1d(proposal.scale))
    return is_estimates(model, idx, theta[None, :], config, rng, Z, prop)


def grad_contrib_is(model, i, theta, config: ISConfig, points=None, rng=None, proposal=None) -> np.ndarray:
    """Self-normalized IS estimate of ``grad_theta log p(y_i | theta)``.

    ``points`` are standard-normal draws (or a uniform ``PointBatch``)
    mapped through the proposal; by default fresh draws come from ``rng``.
    """
    return _single(model, i, theta, config, points, rng, proposal)[1][0]


def loglik_contrib_is(model, i, theta, config: ISConfig, points=None, rng=None, proposal=None) -> float:
    """Log of the unbiased IS estimate of ``p(y_i | theta)``."""
    return float(_single(model, i, theta, config, points, rng, proposal)[0][0])


def loglik_estimate(model: LatentUnitModel, theta, config: ISConfig, rng: np.random.Generator) -> float:
    """Sum over all units of the IS log-likelihood estimates at ``theta``."""
    theta = _as_theta(theta, model.dim)
    units = np.arange(model.n)
    ll, _ = is_estimates(model, units, np.broadcast_to(theta, (model.n, model.dim)), config, rng, with_grad=False)
    return math.fsum(ll)


class ISSource(Model):
    """Noisy per-unit contributions for the subsampled estimators.

    Every call draws fresh importance samples from the held generator, so
    repeated evaluations are independent.
    """

    tractable = False

    def __init__(self, model: LatentUnitModel, config: ISConfig, rng: np.random.Generator):
        _require_latent(model)
        self.model = model
        self.config = config
        self.rng = rng
        self.n = model.n
        self.dim = model.dim

    def loglik_grad_rows(self, idx, theta):
        idx = np.asarray(idx, dtype=np.int64)
        theta = np.asarray(theta, dtype=float)
        th = np.broadcast_to(theta[:, None, :], idx.shape + (self.dim,)).reshape(-1, self.dim)
        ll, g = is_estimates(self.model, idx.reshape(-1), th, self.config, self.rng)
        return ll.reshape(idx.shape), g.reshape(idx.shape + (self.dim,))


class SimulatedLikelihood(Model):
    """Smooth simulated likelihood with draws and proposals frozen at ``center``.

    Because the latent draws do not move with ``theta``, the IS log-likelihood
    is a deterministic smooth function whose exact gradient is the
    self-normalized score.  Hessians are central differences of that gradient.
    """

    tractable = True

    def __init__(self, model: LatentUnitModel, center, config: ISConfig, seed=0, units=None, step: float = FD_STEP):
        _require_latent(model)
        self.model = model
        self.units = np.arange(model.n) if units is None else model._check_index(np.asarray(units))
        self.n = self.units.size
        self.dim = model.dim
        self.config = config
        self.step = step
        self.center = _as_theta(center, model.dim)
        rng = np.random.default_rng(seed)
        th = np.broadcast_to(self.center, (self.n, self.dim))
        self.proposal = build_proposals(model, self.units, th, config.proposal)
        self.Z = standard_points(self.n, config.N, config.points, rng)

    def _eval(self, idx, theta, with_grad=True):
        idx = self._check_index(np.asarray(idx).reshape(-1))
        theta = _as_theta(theta, self.dim)
        prop = LatentProposal(self.proposal.location[idx], self.proposal.scale[idx])
        return is_estimates(
            self.model, self.units[idx], np.broadcast_to(theta, (idx.size, self.dim)), self.config,
            Z=self.Z[idx], proposal=prop, with_grad=with_grad,
        )

    def loglik_rows(self, idx, theta):
        return self._eval(idx, theta, with_grad=False)[0]

    def grad_rows(self, idx, theta):
        return self._eval(idx, theta)[1]

    def hess_rows(self, idx, theta):
        theta = _as_theta(theta, self.dim)
        idx = np.asarray(idx).reshape(-1)
        H = np.empty((idx.size, self.dim, self.dim))
        for j in range(self.dim):
            h = self.step * max(1.0, abs(theta[j]))
            e = np.zeros(self.dim)
            e[j] = h
            H[:, :, j] = (self.grad_rows(idx, theta + e) - self.grad_rows(idx, theta - e)) / (2 * h)
        return 0.5 * (H + np.swapaxes(H, 1, 2))

    def all_terms(self, theta):
        """Per-unit log-likelihoods, gradients and Hessians at ``theta``."""
        idx = np.arange(self.n)
        ll, g = self._eval(idx, theta)
        return ll, g, self.hess_rows(idx, theta)


def build_panel_control_variates(
    model: LatentUnitModel, theta_bar, config: ISConfig | None = None, seed=0, fingerprint: int = 0
) -> ControlVariateCache:
    """Control-variate cache from IS estimates at ``theta_bar``.

    Uses ``CV_SAMPLES`` draws per unit with common random numbers across the
    finite-difference evaluations, and stores the per-unit terms.
    """
    if config is None:
        config = ISConfig(N=CV_SAMPLES)
    sim = SimulatedLikelihood(model, theta_bar, config, seed=seed)
    ll, g, H = sim.all_terms(theta_bar)
    d = model.dim
    return ControlVariateCache(
        theta_bar=_as_theta(theta_bar, d).copy(),
        A_bar=_exact_colsum(g),
        B_bar=_exact_colsum(H.reshape(-1, d * d)).reshape(d, d),
        l_bar=math.fsum(ll),
        n=model.n,
        fingerprint=fingerprint,
        unit_loglik=ll,
        unit_grad=g,
        unit_hess=H,
    )


def subsampled_panel_gradient(
    model: LatentUnitModel, theta, cache: ControlVariateCache, plan: SubsamplePlan, config: ISConfig, rng=None
) -> GradientEstimate:
    """Difference estimator with IS-estimated unit gradients."""
    source = ISSource(model, config, rng if rng is not None else np.random.default_rng())
    return estimate_gradient(source, theta, cache, plan)
