"""Fisher information of the factor-Gaussian family and the natural gradient.

Parameters are stacked as ``(mu, B, c)`` (length ``2d + 1``).  The closed-form
inverse works entirely through ``B'B`` and inner products with ``B``, so
:func:`natural_gradient` costs ``O(d)``.  :func:`fisher_matrix` assembles the
dense matrix and is kept for testing and for the degenerate cases the closed
form cannot handle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .variational import VariationalParams

log = logging.getLogger(__name__)

# B'B below this multiple of c^2 routes to the dense path.
SINGULAR_RATIO = 1e-8
# Smallest admissible Schur complement of the (B, c) block.
MIN_SCHUR = 1e-12


class ConditioningError(FloatingPointError):
    """The Fisher information is too close to singular for a safe step."""

    def __init__(self, message, lam: VariationalParams | None = None):
        super().__init__(message)
        self.lam = lam


@dataclass(frozen=True)
class FisherBlocks:
    """Scalars that parameterize the closed-form ``I_F`` and its inverse.

    The ``(B, B)`` block is ``a_scale * I + a_rank1 * BB'`` and its inverse is
    ``ainv_scale * I + ainv_rank1 * BB'``; the ``(B, c)`` block is
    ``b_coef * B``.
    """

    alpha: float
    btb: float
    a_scale: float
    a_rank1: float
    ainv_scale: float
    ainv_rank1: float
    b_coef: float
    omega: float
    kappa: float
    schur: float


def _check(lam: VariationalParams):
    if lam.c == 0.0:
        raise ValueError("c = 0 makes the variational covariance singular")


def fisher_blocks(lam: VariationalParams) -> FisherBlocks:
    _check(lam)
    d = lam.dim
    c = lam.c
    c2 = c * c
    btb = float(lam.B @ lam.B)
    alpha = 1.0 / (c2 + btb)
    # A = alpha^2 BB' + alpha (B'B) Sigma^-1 = (alpha B'B / c^2) I + alpha^2 (1 - B'B / c^2) BB'
    a_scale = alpha * btb / c2
    a_rank1 = alpha * alpha * (1.0 - btb / c2)
    b_coef = 2.0 * c * alpha * alpha
    omega = 2.0 / c2 * (d - 1 + (c2 * alpha) ** 2)
    if btb > 0:
        r = 1.0 + c2 / btb
        ainv_rank1 = r - 0.5 * r * r
        ainv_scale = c2 * r
        kappa = ainv_rank1 * 2.0 * c * btb * alpha * alpha + 2.0 * c**3 / (btb * (c2 + btb))
        schur = omega - 2.0 * c * kappa * btb * alpha * alpha
    else:
        ainv_rank1 = ainv_scale = kappa = np.inf
        schur = 0.0
    return FisherBlocks(alpha, btb, a_scale, a_rank1, ainv_scale, ainv_rank1, b_coef, omega, kappa, schur)


def sigma_inverse_apply(lam: VariationalParams, v) -> np.ndarray:
    """``Sigma^-1 v`` by the Woodbury identity, vectorized over leading axes."""
    _check(lam)
    v = np.asarray(v, dtype=float)
    c2 = lam.c**2
    return (v - np.multiply.outer(v @ lam.B, lam.B) / (c2 + lam.B @ lam.B)) / c2


def fisher_matrix(lam: VariationalParams) -> np.ndarray:
    """Dense ``(2d+1) x (2d+1)`` Fisher information of ``q_lambda``."""
    _check(lam)
    d = lam.dim
    B = lam.B
    c = lam.c
    Si = np.linalg.inv(lam.covariance())
    Si = 0.5 * (Si + Si.T)
    SiB = Si @ B
    F = np.zeros((2 * d + 1, 2 * d + 1))
    F[:d, :d] = Si
    F[d : 2 * d, d : 2 * d] = np.outer(SiB, SiB) + (B @ SiB) * Si
    cross = 2.0 * c * (Si @ SiB)
    F[d : 2 * d, -1] = cross
    F[-1, d : 2 * d] = cross
    F[-1, -1] = 2.0 * c * c * np.trace(Si @ Si)
    return F


def _dense_solve(lam: VariationalParams, g: np.ndarray) -> np.ndarray:
    # Least squares returns the minimum-norm step when I_F is singular.
    F = fisher_matrix(lam)
    sol, *_ = np.linalg.lstsq(F, g, rcond=1e-12)
    return sol


def natural_gradient(lam: VariationalParams, g) -> np.ndarray:
    """``I_F(lambda)^-1 g`` for a gradient stacked as ``(g_mu, g_B, g_c)``.

    Uses the closed-form inverse unless ``B'B`` is negligible against
    ``c^2`` or ``d == 1`` (where only ``B^2 + c^2`` is identified and
    ``I_F`` is singular); those cases take a dense least-squares solve.
    """
    g = np.asarray(g, dtype=float)
    d = lam.dim
    if g.shape != (2 * d + 1,):
        raise ValueError(f"gradient must have length {2 * d + 1}")
    _check(lam)
    c2 = lam.c**2
    B = lam.B
    blocks = fisher_blocks(lam)
    if d == 1 or blocks.btb < SINGULAR_RATIO * c2:
        return _dense_solve(lam, g)
    if not blocks.schur > MIN_SCHUR:
        raise ConditioningError(
            f"Fisher information is ill-conditioned (Schur complement {blocks.schur:.3e}) "
            f"at c={lam.c:.6g}, B'B={blocks.btb:.6g}",
            lam,
        )
    g_mu, g_B, g_c = g[:d], g[d : 2 * d], g[-1]
    out = np.empty_like(g)
    # Sigma g_mu
    out[:d] = B * (B @ g_mu) + c2 * g_mu
    k_over = blocks.kappa / blocks.schur
    bg = B @ g_B
    # (A^-1 + kappa^2/c2 BB') g_B - kappa/c2 B g_c
    out[d : 2 * d] = (
        blocks.ainv_scale * g_B
        + (blocks.ainv_rank1 + blocks.kappa * k_over) * bg * B
        - k_over * g_c * B
    )
    out[-1] = -k_over * bg + g_c / blocks.schur
    return out
