"""Factor-Gaussian variational family ``N(mu, BB' + c^2 I)``.

Draws use the reparameterization ``theta = mu + B z + c eps`` with a scalar
``z`` and a ``d``-vector ``eps``, both standard normal.  Everything that
touches ``Sigma`` is written through ``B'B`` and inner products with ``B`` so
no ``d x d`` matrix is formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rqmc

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class VariationalParams:
    """``lambda = (mu, B, c)``; ``c`` is unconstrained and only ``c^2`` matters."""

    mu: np.ndarray
    B: np.ndarray
    c: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        B = np.asarray(self.B, dtype=float).reshape(-1)
        if mu.shape != B.shape:
            raise ValueError("mu and B must have the same length")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", float(self.c))
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(B)) and np.isfinite(self.c)):
            raise ValueError("variational parameters must be finite")

    @property
    def dim(self) -> int:
        return self.mu.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mu, self.B, [self.c]])

    @classmethod
    def from_flat(cls, x) -> "VariationalParams":
        x = np.asarray(x, dtype=float)
        d = (x.size - 1) // 2
        if x.size != 2 * d + 1:
            raise ValueError("flat vector must have length 2d + 1")
        return cls(x[:d], x[d : 2 * d], x[-1])

    def covariance(self) -> np.ndarray:
        return np.outer(self.B, self.B) + self.c**2 * np.eye(self.dim)

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(self.B**2 + self.c**2)


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic ``Normal(0, variance * I)`` prior."""

    variance: float = 50.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("prior variance must be positive")

    def logpdf(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        d = theta.shape[-1]
        return -0.5 * d * (LOG_2PI + np.log(self.variance)) - 0.5 * np.sum(theta**2, axis=-1) / self.variance


@dataclass(frozen=True)
class DrawBatch:
    """Standard-normal innovations for ``S`` reparameterized draws."""

    z: np.ndarray
    E: np.ndarray
    source: str = "MC"

    @property
    def size(self) -> int:
        return self.z.size


@dataclass(frozen=True)
class LowerBoundEstimate:
    value: float
    scaled_value: float
    iteration: int


def make_draws(d: int, S: int, source: str = "MC", seed=None) -> DrawBatch:
    """Draw ``S`` innovations ``(z, eps)`` by plain Monte Carlo or scrambled Sobol'."""
    source = source.upper()
    if source == "MC":
        rng = np.random.default_rng(seed)
        U = rng.standard_normal((S, d + 1))
    elif source == "RQMC":
        U = rqmc.to_normal(rqmc.sobol_batch(d + 1, S, seed=seed, scrambled=True))
    else:
        raise ValueError(f"unknown point source {source!r}")
    return DrawBatch(U[:, 0].copy(), U[:, 1:].copy(), source)


def _check_c(lam: VariationalParams):
    if lam.c == 0.0:
        raise ValueError("c = 0 makes the variational covariance singular")


def reparam_draw(lam: VariationalParams, z, eps) -> np.ndarray:
    """``theta = mu + B z + c eps``; vectorized over leading axes of ``z``/``eps``."""
    eps = np.asarray(eps, dtype=float)
    z = np.asarray(z, dtype=float)
    if eps.shape[-1] != lam.dim:
        raise ValueError(f"eps must have trailing length {lam.dim}")
    return lam.mu + z[..., None] * lam.B + lam.c * eps


def draw_thetas(lam: VariationalParams, draws: DrawBatch) -> np.ndarray:
    return reparam_draw(lam, draws.z, draws.E)


def log_det_sigma(lam: VariationalParams) -> float:
    # |BB' + c^2 I| = c^(2(d-1)) (c^2 + B'B)
    _check_c(lam)
    c2 = lam.c**2
    return (lam.dim - 1) * np.log(c2) + np.log(c2 + lam.B @ lam.B)


def prior_term_A(lam: VariationalParams, prior: PriorSpec) -> float:
    """``E_q[log p(theta) - log q(theta)]`` including all normalizing constants."""
    _check_c(lam)
    d = lam.dim
    s2 = prior.variance
    expected_log_prior = -0.5 * d * (LOG_2PI + np.log(s2)) - (
        lam.mu @ lam.mu + lam.B @ lam.B + d * lam.c**2
    ) / (2.0 * s2)
    entropy = 0.5 * d * (LOG_2PI + 1.0) + 0.5 * log_det_sigma(lam)
    return float(expected_log_prior + entropy)


def grad_A(lam: VariationalParams, prior: PriorSpec) -> np.ndarray:
    """Gradient of :func:`prior_term_A`, stacked as ``(d_mu, d_B, d_c)``."""
    _check_c(lam)
    d = lam.dim
    s2 = prior.variance
    c = lam.c
    btb = lam.B @ lam.B
    g_mu = -lam.mu / s2
    g_B = -lam.B / s2 + lam.B / (c * c + btb)
    g_c = -d * c / s2 + (d - btb / (c * c + btb)) / c
    return np.concatenate([g_mu, g_B, [g_c]])


def lb_gradient_estimate(lam: VariationalParams, draws: DrawBatch, G, prior: PriorSpec) -> np.ndarray:
    """Reparameterization estimate of the lower-bound gradient.

    ``G`` holds one unbiased log-likelihood gradient estimate per draw,
    evaluated at ``theta_s = mu + B z_s + c eps_s``.  The Jacobian of the
    draw map contributes ``G``, ``z G`` and ``eps' G`` to the ``mu``, ``B``
    and ``c`` blocks.
    """
    G = np.asarray(G, dtype=float)
    S = draws.size
    if S == 0:
        raise ValueError("need at least one draw")
    if G.shape != (S, lam.dim):
        raise ValueError(f"expected gradient estimates of shape {(S, lam.dim)}, got {G.shape}")
    bad = ~np.all(np.isfinite(G), axis=1)
    if bad.any():
        raise FloatingPointError(f"non-finite gradient estimate at draws {np.flatnonzero(bad)[:10].tolist()}")
    g_mu = G.sum(axis=0) / S
    g_B = (draws.z @ G) / S
    g_c = np.einsum("sd,sd->", draws.E, G) / S
    return grad_A(lam, prior) + np.concatenate([g_mu, g_B, [g_c]])


def lower_bound_estimate(
    lam: VariationalParams, loglik_estimates, prior: PriorSpec, n: int, iteration: int = 0
) -> LowerBoundEstimate:
    """``A(lambda)`` plus the draw average of the log-likelihood estimates."""
    ll = np.asarray(loglik_estimates, dtype=float)
    if ll.size == 0:
        raise ValueError("need at least one log-likelihood estimate")
    if not np.all(np.isfinite(ll)):
        raise FloatingPointError(f"non-finite log-likelihood estimate at iteration {iteration}")
    value = prior_term_A(lam, prior) + ll.mean()
    return LowerBoundEstimate(float(value), float(value / n), iteration)


def density_eval(lam: VariationalParams, theta) -> np.ndarray:
    """``log q_lambda(theta)``, vectorized over leading axes of ``theta``."""
    _check_c(lam)
    r = np.asarray(theta, dtype=float) - lam.mu
    c2 = lam.c**2
    rb = r @ lam.B
    # Woodbury: Sigma^-1 = (I - BB'/(c^2 + B'B)) / c^2
    quad = (np.sum(r * r, axis=-1) - rb * rb / (c2 + lam.B @ lam.B)) / c2
    return -0.5 * (lam.dim * LOG_2PI + log_det_sigma(lam) + quad)


def marginal_density_grid(lam: VariationalParams, j: int, points: int = 201, width: float = 5.0):
    """Grid over ``mu_j +/- width * sd_j`` with the Gaussian marginal density."""
    sd = float(np.sqrt(lam.B[j] ** 2 + lam.c**2))
    grid = lam.mu[j] + sd * np.linspace(-width, width, points)
    dens = np.exp(-0.5 * ((grid - lam.mu[j]) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
    return grid, dens
