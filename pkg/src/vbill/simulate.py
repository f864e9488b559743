"""Synthetic datasets for the logistic and random-intercept panel examples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

# Intercept, two binary covariates, one continuous covariate.
LOGISTIC_BETA = np.array([-1.609, -0.159, 0.085, 0.766])
LOGISTIC_BERNOULLI_P = (0.5, 0.3)
PANEL_BETA = np.array([-1.5, 1.5, 0.5, 0.25, 0.3, 0.8, 0.45, 0.85, 0.75, 0.67, 1.5])
PANEL_GAMMA = 0.41
PANEL_T = 5


@dataclass
class LogisticData:
    X: np.ndarray
    y: np.ndarray
    beta: np.ndarray


@dataclass
class PanelData:
    X: np.ndarray  # (n, T, p + 1), first column ones
    y: np.ndarray  # (n, T)
    beta: np.ndarray
    gamma: float
    alpha: np.ndarray

    @property
    def theta(self) -> np.ndarray:
        return np.append(self.beta, self.gamma)


def simulate_logistic(n: int, beta=None, seed=None) -> LogisticData:
    """``x = (1, Bernoulli, Bernoulli, U(0,1))`` and ``y ~ Bernoulli(expit(x'beta))``."""
    beta = LOGISTIC_BETA if beta is None else np.asarray(beta, dtype=float)
    if beta.size != 4:
        raise ValueError("logistic design has four coefficients")
    rng = np.random.default_rng(seed)
    X = np.empty((n, 4))
    X[:, 0] = 1.0
    X[:, 1] = rng.random(n) < LOGISTIC_BERNOULLI_P[0]
    X[:, 2] = rng.random(n) < LOGISTIC_BERNOULLI_P[1]
    X[:, 3] = rng.random(n)
    y = (rng.random(n) < expit(X @ beta)).astype(float)
    return LogisticData(X, y, beta.copy())


def simulate_panel(n: int, T: int = PANEL_T, beta=None, gamma: float = PANEL_GAMMA, seed=None) -> PanelData:
    """Random-intercept logistic panel with ``U(0,1)`` covariates and ``alpha_i ~ N(0, e^gamma)``."""
    beta = PANEL_BETA if beta is None else np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    p = beta.size - 1
    X = np.empty((n, T, p + 1))
    X[..., 0] = 1.0
    X[..., 1:] = rng.random((n, T, p))
    alpha = rng.normal(0.0, np.exp(0.5 * gamma), size=n)
    eta = X @ beta + alpha[:, None]
    y = (rng.random((n, T)) < expit(eta)).astype(float)
    return PanelData(X, y, beta.copy(), float(gamma), alpha)
