"""Statistical models exposing per-unit log-likelihood contributions.

A *unit* is one independent likelihood factor: an observation for the
logistic regression, a panel for the random-intercept model.  Every model
offers scalar accessors (``loglik_contrib`` and friends, taking one index)
and batched ``*_rows`` variants that accept an index array of any shape
together with a parameter array broadcastable against it.  The batched
variants are what the subsampling estimators call; they never form
``n x d`` intermediates beyond the requested rows.

Latent-variable models (panels) cannot evaluate their contributions exactly.
They expose the joint density of a unit and its latent effect instead, and
:mod:`vbill.fisher_identity` turns that into gradient estimates.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit

LOG_2PI = np.log(2.0 * np.pi)


class IntractableContribution(RuntimeError):
    """Raised when an exact contribution is requested from a latent-variable model."""


def _as_theta(theta, d: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != d:
        raise ValueError(f"expected parameter vectors of length {d}, got {theta.shape[-1]}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameter vector has non-finite entries")
    return theta


class Model:
    """Base class for models with ``n`` independent units and ``dim`` parameters."""

    n: int
    dim: int
    tractable = True

    def _check_index(self, i) -> np.ndarray:
        i = np.asarray(i)
        if not np.issubdtype(i.dtype, np.integer):
            raise TypeError("unit indices must be integers")
        if i.size and (i.min() < 0 or i.max() >= self.n):
            raise IndexError(f"unit index out of range for n={self.n}")
        return i

    # scalar accessors delegate to the batched forms
    def loglik_contrib(self, i: int, theta) -> float:
        return float(self.loglik_rows(np.asarray(i), theta))

    def grad_contrib(self, i: int, theta) -> np.ndarray:
        return self.grad_rows(np.asarray(i), theta)

    def hess_contrib(self, i: int, theta) -> np.ndarray:
        return self.hess_rows(np.asarray(i), theta)

    def loglik_rows(self, idx, theta):
        raise IntractableContribution(f"{type(self).__name__} has no exact contributions")

    def grad_rows(self, idx, theta):
        raise IntractableContribution(f"{type(self).__name__} has no exact gradients")

    def hess_rows(self, idx, theta):
        raise IntractableContribution(f"{type(self).__name__} has no exact Hessians")

    def hvp_rows(self, idx, theta, v):
        """Hessian-vector products ``H_i(theta) @ v`` for the requested rows."""
        H = self.hess_rows(idx, theta)
        return np.einsum("...jk,...k->...j", H, np.asarray(v, dtype=float))

    def subset(self, idx) -> "Model":
        raise NotImplementedError

    # full-data sums, used by the MCMC baselines and by small tests
    def loglik(self, theta) -> float:
        return float(np.sum(self.loglik_rows(np.arange(self.n), theta)))

    def grad(self, theta) -> np.ndarray:
        return np.sum(self.grad_rows(np.arange(self.n), theta), axis=0)

    def hess(self, theta) -> np.ndarray:
        return np.sum(self.hess_rows(np.arange(self.n), theta), axis=0)


class LogisticRegressionModel(Model):
    """Bernoulli responses with a logit link.

    ``X`` must already carry the intercept as a column of ones.
    """

    def __init__(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2:
            raise ValueError("design matrix must be two-dimensional")
        if y.shape != (X.shape[0],):
            raise ValueError("response length does not match the design rows")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("responses must be exactly 0 or 1")
        self.X = X
        self.y = y
        self.n, self.dim = X.shape

    def _eta(self, idx, theta):
        idx = self._check_index(idx)
        theta = _as_theta(theta, self.dim)
        Xi = self.X[idx]
        return Xi, self.y[idx], np.einsum("...j,...j->...", Xi, theta)

    def loglik_rows(self, idx, theta):
        _, yi, eta = self._eta(idx, theta)
        return yi * eta + log_expit(-eta)

    def grad_rows(self, idx, theta):
        Xi, yi, eta = self._eta(idx, theta)
        return (yi - expit(eta))[..., None] * Xi

    def hess_rows(self, idx, theta):
        Xi, _, eta = self._eta(idx, theta)
        p = expit(eta)
        return -(p * (1.0 - p))[..., None, None] * Xi[..., :, None] * Xi[..., None, :]

    def hvp_rows(self, idx, theta, v):
        Xi, _, eta = self._eta(idx, theta)
        p = expit(eta)
        xv = np.einsum("...j,...j->...", Xi, np.asarray(v, dtype=float))
        return -(p * (1.0 - p) * xv)[..., None] * Xi

    def subset(self, idx):
        idx = self._check_index(idx)
        return LogisticRegressionModel(self.X[idx], self.y[idx])

    # Full-data versions avoid materializing the per-row Hessians.
    def loglik(self, theta):
        eta = self.X @ _as_theta(theta, self.dim)
        return float(np.sum(self.y * eta + log_expit(-eta)))

    def grad(self, theta):
        eta = self.X @ _as_theta(theta, self.dim)
        return self.X.T @ (self.y - expit(eta))

    def hess(self, theta):
        eta = self.X @ _as_theta(theta, self.dim)
        p = expit(eta)
        return -(self.X * (p * (1.0 - p))[:, None]).T @ self.X


class ConjugateGaussianModel(Model):
    """``y_i ~ Normal(theta, Omega)`` with known observation covariance.

    ``Omega`` defaults to the identity (unit observation variance).  With a
    ``Normal(0, s0^2 I)`` prior the posterior is available in closed form,
    which makes this the reference model for optimizer tests.
    """

    def __init__(self, y, obs_precision=None):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        self.y = y
        self.n, self.dim = y.shape
        if obs_precision is None:
            obs_precision = np.eye(self.dim)
        self.P = np.asarray(obs_precision, dtype=float)
        try:
            chol = np.linalg.cholesky(self.P)
        except np.linalg.LinAlgError:
            raise ValueError("observation precision must be positive definite") from None
        self._const = np.sum(np.log(np.diag(chol))) - 0.5 * self.dim * LOG_2PI

    def loglik_rows(self, idx, theta):
        idx = self._check_index(idx)
        r = self.y[idx] - _as_theta(theta, self.dim)
        return self._const - 0.5 * np.einsum("...j,jk,...k->...", r, self.P, r)

    def grad_rows(self, idx, theta):
        idx = self._check_index(idx)
        r = self.y[idx] - _as_theta(theta, self.dim)
        return r @ self.P.T

    def hess_rows(self, idx, theta):
        idx = self._check_index(idx)
        theta = _as_theta(theta, self.dim)
        shape = np.broadcast_shapes(idx.shape, theta.shape[:-1])
        return np.broadcast_to(-self.P, shape + self.P.shape).copy()

    def hvp_rows(self, idx, theta, v):
        idx = self._check_index(idx)
        theta = _as_theta(theta, self.dim)
        shape = np.broadcast_shapes(idx.shape, theta.shape[:-1])
        return np.broadcast_to(-np.asarray(v, dtype=float) @ self.P.T, shape + (self.dim,)).copy()

    def subset(self, idx):
        idx = self._check_index(idx)
        return ConjugateGaussianModel(self.y[idx], self.P)

    def posterior(self, prior_var: float):
        """Exact posterior ``(mean, covariance)`` under a ``Normal(0, prior_var I)`` prior."""
        prec = self.n * self.P + np.eye(self.dim) / prior_var
        cov = np.linalg.inv(prec)
        mean = cov @ (self.P @ self.y.sum(axis=0))
        return mean, cov

    def log_evidence(self, prior_var: float) -> float:
        """Log marginal likelihood under a ``Normal(0, prior_var I)`` prior."""
        mean, cov = self.posterior(prior_var)
        d = self.dim
        log_prior = -0.5 * d * np.log(2 * np.pi * prior_var) - 0.5 * mean @ mean / prior_var
        log_post = -0.5 * d * LOG_2PI - 0.5 * np.linalg.slogdet(cov)[1]
        return self.loglik(mean) + log_prior - log_post


class LatentUnitModel(Model):
    """Units whose contribution integrates a scalar latent effect ``alpha_i``.

    Subclasses implement the vectorized joint density of a unit and its
    latent value.  The last parameter coordinate is ``gamma = log tau^2``,
    the log variance of the ``Normal(0, tau^2)`` latent prior.
    """

    tractable = False

    def joint_logdensity_and_grad(self, i: int, theta, alpha):
        """``log p(y_i, alpha | theta)`` and its ``theta``-gradient.

        ``alpha`` may be a scalar or an array; outputs follow its shape with
        a trailing axis of length ``dim`` for the gradient.
        """
        alpha = np.asarray(alpha, dtype=float)
        if not np.all(np.isfinite(alpha)):
            raise ValueError("latent values must be finite")
        idx = self._check_index(np.asarray(i))
        theta = _as_theta(theta, self.dim)
        a = alpha.reshape(-1)
        lp, g = self.joint_terms(np.broadcast_to(idx, a.shape), np.broadcast_to(theta, a.shape + (self.dim,)), a)
        return lp.reshape(alpha.shape), g.reshape(alpha.shape + (self.dim,))

    def latent_prior_logvar(self, theta):
        return np.asarray(theta)[..., -1]

    # --- hooks for subclasses -------------------------------------------
    def joint_terms(self, units, theta, alpha):
        """Vectorized joint log-density and gradient.

        ``units`` has shape ``(k,)``, ``theta`` ``(k, d)``, ``alpha`` ``(k,)``
        or ``(k, N)``.  Returns arrays shaped like ``alpha`` and
        ``alpha.shape + (d,)``.
        """
        raise NotImplementedError

    def joint_loglik(self, units, theta, alpha):
        """Joint log-density only, same broadcasting as :meth:`joint_terms`."""
        return self.joint_terms(units, theta, alpha)[0]

    def latent_derivatives(self, units, theta, alpha):
        """First and second ``alpha``-derivatives of the joint log-density."""
        raise NotImplementedError

    def joint_loglik_saving(self, units, theta, alpha):
        """:meth:`joint_loglik` plus intermediates reused by :meth:`weighted_score_saved`."""
        return self.joint_loglik(units, theta, alpha), None

    def weighted_score_saved(self, units, theta, alpha, weights, saved):
        return self.weighted_score(units, theta, alpha, weights)

    def weighted_score(self, units, theta, alpha, weights):
        """``sum_j w_j grad_theta log p(y_i, alpha_j | theta)`` per unit.

        ``alpha`` and ``weights`` have shape ``(k, N)``.  The default forms
        every per-sample gradient; subclasses may contract earlier.
        """
        _, g = self.joint_terms(units, theta, alpha)
        return np.einsum("kn,knd->kd", weights, g)

    def unit_sizes(self, units) -> np.ndarray:
        raise NotImplementedError


def _gamma_score(alpha, gamma):
    # d/dgamma log Normal(alpha; 0, exp(gamma))
    return 0.5 * (alpha * alpha * np.exp(-gamma) - 1.0)


def _log_normal_prior(alpha, gamma):
    return -0.5 * (LOG_2PI + gamma) - 0.5 * alpha * alpha * np.exp(-gamma)


class PanelLogisticModel(LatentUnitModel):
    """Logistic regression with a Normal random intercept per panel.

    ``X`` has shape ``(n, T, p + 1)`` with the intercept column included and
    ``y`` has shape ``(n, T)``.  Parameters are ``theta = (beta, gamma)``
    with ``gamma = log tau^2``, so ``dim = p + 2``.
    """

    def __init__(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 3 or y.shape != X.shape[:2]:
            raise ValueError("expected X of shape (n, T, p) and y of shape (n, T)")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("responses must be exactly 0 or 1")
        self.X = X
        self.y = y
        self.n, self.T, self.n_beta = X.shape
        self.dim = self.n_beta + 1

    def unit_sizes(self, units):
        return np.full(np.shape(units), self.T)

    def subset(self, idx):
        idx = self._check_index(idx)
        return PanelLogisticModel(self.X[idx], self.y[idx])

    def _linear(self, units, theta):
        # x_it' beta for each requested unit: (k, T)
        return np.einsum("ktj,kj->kt", self.X[units], theta[:, : self.n_beta])

    def joint_terms(self, units, theta, alpha):
        xb = self._linear(units, theta)
        gamma = theta[:, -1]
        y = self.y[units]
        lead = (slice(None),) + (None,) * (alpha.ndim - 1)
        eta = xb[lead + (slice(None),)] + alpha[..., None]
        yk = y[lead + (slice(None),)]
        lp = np.sum(yk * eta + log_expit(-eta), axis=-1) + _log_normal_prior(alpha, gamma[lead])
        resid = yk - expit(eta)
        Xk = self.X[units]
        gb = np.einsum("k...t,ktj->k...j", resid, Xk)
        gg = _gamma_score(alpha, gamma[lead])
        return lp, np.concatenate([gb, gg[..., None]], axis=-1)

    def joint_loglik(self, units, theta, alpha):
        xb = self._linear(units, theta)
        gamma = theta[:, -1]
        lead = (slice(None),) + (None,) * (alpha.ndim - 1)
        eta = xb[lead + (slice(None),)] + alpha[..., None]
        yk = self.y[units][lead + (slice(None),)]
        return np.sum(yk * eta + log_expit(-eta), axis=-1) + _log_normal_prior(alpha, gamma[lead])

    def joint_loglik_saving(self, units, theta, alpha):
        # with s = 2y - 1 and u = s * eta: y eta - log(1 + e^eta) = log expit(u)
        # and y - expit(eta) = s expit(-u) = s exp(log expit(u) - u)
        xb = self._linear(units, theta)
        gamma = theta[:, -1]
        sgn = 2.0 * self.y[units][:, None, :] - 1.0
        u = (xb[:, None, :] + alpha[..., None]) * sgn
        le = log_expit(u)
        lp = le.sum(axis=-1) + _log_normal_prior(alpha, gamma[:, None])
        np.subtract(le, u, out=u)
        np.exp(u, out=u)
        u *= sgn
        return lp, u

    def weighted_score_saved(self, units, theta, alpha, weights, saved):
        if saved is None:
            return self.weighted_score(units, theta, alpha, weights)
        gamma = theta[:, -1]
        r = np.einsum("kn,knt->kt", weights, saved)
        gb = np.einsum("kt,ktj->kj", r, self.X[units])
        gg = np.einsum("kn,kn->k", weights, _gamma_score(alpha, gamma[:, None]))
        return np.concatenate([gb, gg[:, None]], axis=-1)

    def latent_derivatives(self, units, theta, alpha):
        xb = self._linear(units, theta)
        gamma = theta[:, -1]
        lead = (slice(None),) + (None,) * (alpha.ndim - 1)
        eta = xb[lead + (slice(None),)] + alpha[..., None]
        p = expit(eta)
        yk = self.y[units][lead + (slice(None),)]
        prec = np.exp(-gamma[lead])
        d1 = np.sum(yk - p, axis=-1) - alpha * prec
        d2 = -np.sum(p * (1.0 - p), axis=-1) - prec
        return d1, d2

    def weighted_score(self, units, theta, alpha, weights):
        xb = self._linear(units, theta)
        gamma = theta[:, -1]
        eta = xb[:, None, :] + alpha[..., None]
        resid = self.y[units][:, None, :] - expit(eta)
        r = np.einsum("kn,knt->kt", weights, resid)
        gb = np.einsum("kt,ktj->kj", r, self.X[units])
        gg = np.einsum("kn,kn->k", weights, _gamma_score(alpha, gamma[:, None]))
        return np.concatenate([gb, gg[:, None]], axis=-1)


class NormalNormalPanelModel(LatentUnitModel):
    """``y_it | alpha_i ~ Normal(alpha_i, 1)``, ``alpha_i ~ Normal(0, tau^2)``.

    The single parameter is ``gamma = log tau^2``.  Marginal contributions
    and their derivatives are closed-form, so this model serves as an exact
    reference for the importance-sampling estimators.
    """

    dim = 1
    tractable = True

    def __init__(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim != 2:
            raise ValueError("expected y of shape (n, T)")
        self.y = y
        self.n, self.T = y.shape
        self._sum = y.sum(axis=1)
        self._sumsq = (y * y).sum(axis=1)

    def unit_sizes(self, units):
        return np.full(np.shape(units), self.T)

    def subset(self, idx):
        idx = self._check_index(idx)
        return NormalNormalPanelModel(self.y[idx])

    # exact marginal quantities -------------------------------------------
    def _marginal_parts(self, idx, theta):
        idx = self._check_index(idx)
        theta = _as_theta(theta, 1)
        u = np.exp(theta[..., 0])
        return self._sum[idx], self._sumsq[idx], u, 1.0 + self.T * u

    def loglik_rows(self, idx, theta):
        S, Q, u, D = self._marginal_parts(idx, theta)
        return -0.5 * self.T * LOG_2PI - 0.5 * np.log(D) - 0.5 * Q + 0.5 * u * S * S / D

    def grad_rows(self, idx, theta):
        S, Q, u, D = self._marginal_parts(idx, theta)
        dl_du = -0.5 * self.T / D + 0.5 * S * S / (D * D)
        return (u * dl_du)[..., None]

    def hess_rows(self, idx, theta):
        S, Q, u, D = self._marginal_parts(idx, theta)
        T = self.T
        dl_du = -0.5 * T / D + 0.5 * S * S / (D * D)
        d2l_du2 = 0.5 * T * T / (D * D) - T * S * S / D**3
        return (u * dl_du + u * u * d2l_du2)[..., None, None]

    def marginal_logpdf_dense(self, i: int, theta) -> float:
        """``log Normal(y_i; 0, I + tau^2 11')`` by dense linear algebra."""
        tau2 = float(np.exp(np.asarray(theta, dtype=float)[0]))
        T = self.T
        cov = np.eye(T) + tau2 * np.ones((T, T))
        yi = self.y[i]
        sign, logdet = np.linalg.slogdet(cov)
        return float(-0.5 * T * LOG_2PI - 0.5 * logdet - 0.5 * yi @ np.linalg.solve(cov, yi))

    def latent_posterior(self, i: int, theta):
        """Exact ``alpha_i | y_i`` mean and variance."""
        tau2 = float(np.exp(np.asarray(theta, dtype=float)[0]))
        var = tau2 / (self.T * tau2 + 1.0)
        return var * self._sum[i], var

    # joint-density hooks --------------------------------------------------
    def joint_terms(self, units, theta, alpha):
        gamma = theta[:, 0]
        lead = (slice(None),) + (None,) * (alpha.ndim - 1)
        S = self._sum[units][lead]
        Q = self._sumsq[units][lead]
        # sum_t log N(y_t; alpha, 1) = -T/2 log 2pi - (Q - 2 alpha S + T alpha^2)/2
        lp = -0.5 * self.T * LOG_2PI - 0.5 * (Q - 2.0 * alpha * S + self.T * alpha * alpha)
        lp = lp + _log_normal_prior(alpha, gamma[lead])
        return lp, _gamma_score(alpha, gamma[lead])[..., None]

    def latent_derivatives(self, units, theta, alpha):
        gamma = theta[:, 0]
        lead = (slice(None),) + (None,) * (alpha.ndim - 1)
        S = self._sum[units][lead]
        prec = np.exp(-gamma[lead])
        d1 = S - self.T * alpha - alpha * prec
        d2 = -self.T - prec + 0.0 * alpha
        return d1, d2
