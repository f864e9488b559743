"""Unbiased subsampled estimators of the log-likelihood and its gradient.

The gradient estimator is the difference estimator around a first-order
Taylor control variate centred at ``theta_bar``::

    G(theta, u) = A + B (theta - theta_bar) + (n/m) sum_i d_{u_i}(theta)
    d_k(theta)  = g_k(theta) - g_k(theta_bar) - H_k(theta_bar)(theta - theta_bar)

where ``A`` and ``B`` are the full-data sums of unit gradients and Hessians at
``theta_bar``.  The log-likelihood estimator uses the second-order expansion
in the same way and is exactly unbiased as well.  Indices are drawn by simple
random sampling with replacement, optionally within chunks.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .models import Model

# Rows processed per vectorized step when streaming full-data sums.
ROW_BATCH = 65536
_CACHE_MAGIC = b"VBCV0001"


def _exact_colsum(a: np.ndarray) -> np.ndarray:
    """Correctly rounded column sums of a 2-d array."""
    return np.array([math.fsum(col) for col in a.T]) if a.shape[0] else np.zeros(a.shape[1])


@dataclass
class ChunkPartial:
    n: int
    l_sum: float
    A: np.ndarray
    B: np.ndarray


@dataclass
class ControlVariateCache:
    """Full-data Taylor sums at the central value ``theta_bar``.

    ``unit_*`` arrays are only present when per-unit terms cannot be
    recomputed cheaply (panel models, where they come from importance
    sampling).  ``chunks`` holds per-chunk partial sums in manifest order.
    """

    theta_bar: np.ndarray
    A_bar: np.ndarray
    B_bar: np.ndarray
    l_bar: float
    n: int
    fingerprint: int = 0
    chunks: list[ChunkPartial] = field(default_factory=list)
    unit_loglik: np.ndarray | None = None
    unit_grad: np.ndarray | None = None
    unit_hess: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.theta_bar.size

    def control_gradient(self, theta) -> np.ndarray:
        """``w(theta) = A + B (theta - theta_bar)``."""
        delta = np.asarray(theta, dtype=float) - self.theta_bar
        return self.A_bar + delta @ self.B_bar.T

    def control_loglik(self, theta) -> np.ndarray:
        delta = np.asarray(theta, dtype=float) - self.theta_bar
        return self.l_bar + delta @ self.A_bar + 0.5 * np.einsum("...j,jk,...k->...", delta, self.B_bar, delta)

    def taylor_terms(self, source: Model, idx, theta):
        """Per-row ``(l_k(theta_bar), g_k(theta_bar), H_k(theta_bar) delta)``.

        ``idx`` has shape ``(S, m)`` and ``theta`` ``(S, d)``.
        """
        delta = (np.asarray(theta, dtype=float) - self.theta_bar)[:, None, :]
        if self.unit_grad is not None:
            l0 = self.unit_loglik[idx]
            g0 = self.unit_grad[idx]
            hd = np.einsum("smjk,smk->smj", self.unit_hess[idx], np.broadcast_to(delta, g0.shape))
            return l0, g0, hd
        tb = self.theta_bar
        l0 = source.loglik_rows(idx, tb)
        g0 = source.grad_rows(idx, tb)
        hd = source.hvp_rows(idx, tb, delta)
        return l0, g0, hd

    # ---------------------------------------------------------------- I/O
    def save(self, path) -> None:
        """Write the flat little-endian record (d, n, fingerprint, theta_bar, l_bar, A_bar, B_bar)."""
        d = self.dim
        with open(path, "wb") as fh:
            fh.write(_CACHE_MAGIC)
            fh.write(struct.pack("<qqQ", d, self.n, self.fingerprint))
            body = np.concatenate([self.theta_bar, [self.l_bar], self.A_bar, self.B_bar.reshape(-1)])
            fh.write(body.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, fingerprint: int | None = None) -> "ControlVariateCache":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:8] != _CACHE_MAGIC:
            raise ValueError(f"{path}: not a control-variate cache file")
        d, n, fp = struct.unpack("<qqQ", raw[8:32])
        body = np.frombuffer(raw[32:], dtype="<f8").astype(float)
        if body.size != 2 * d + 1 + d * d:
            raise ValueError(f"{path}: truncated cache record")
        if fingerprint is not None and fp != fingerprint:
            raise ValueError(f"{path}: cache was built for dataset {fp:016x}, not {fingerprint:016x}")
        theta_bar = body[:d]
        l_bar = float(body[d])
        A = body[d + 1 : 2 * d + 1]
        B = body[2 * d + 1 :].reshape(d, d)
        return cls(theta_bar.copy(), A.copy(), B.copy(), l_bar, int(n), int(fp))


@dataclass(frozen=True)
class SubsamplePlan:
    """Indices drawn uniformly with replacement from ``{0, ..., n-1}``."""

    indices: np.ndarray
    n: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise IndexError("plan index out of range")
        object.__setattr__(self, "indices", idx)

    @property
    def m(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class GradientEstimate:
    """An unbiased gradient estimate with the per-coordinate variance of its terms."""

    value: np.ndarray
    m: int
    sample_variance: np.ndarray

    @property
    def estimator_variance(self) -> np.ndarray:
        return self.sample_variance / self.m


def draw_plan(n: int, m: int, rng: np.random.Generator) -> SubsamplePlan:
    if m < 1:
        raise ValueError("subsample size must be positive")
    return SubsamplePlan(rng.integers(0, n, size=m), n)


def allocate_subsample(chunk_sizes: Sequence[int], m: int) -> np.ndarray:
    """Per-chunk subsample sizes proportional to chunk sizes.

    Every non-empty chunk gets at least one draw so that each chunk's
    residual sum is estimated; rounding slack goes to the largest chunk.
    """
    sizes = np.asarray(chunk_sizes, dtype=np.int64)
    if np.any(sizes < 0) or sizes.sum() == 0:
        raise ValueError("chunk sizes must be non-negative and not all zero")
    nonempty = sizes > 0
    if m < nonempty.sum():
        raise ValueError(f"subsample size {m} is smaller than the number of non-empty chunks")
    mk = np.rint(m * sizes / sizes.sum()).astype(np.int64)
    mk[nonempty] = np.maximum(mk[nonempty], 1)
    largest = int(np.argmax(sizes))
    mk[largest] += m - mk.sum()
    if mk[largest] < 1:
        raise ValueError("cannot allocate subsample across chunks")
    return mk


# ----------------------------------------------------------------- cache


def _chunk_partial(model: Model, theta_bar: np.ndarray, offset: int) -> ChunkPartial:
    d = model.dim
    l_parts, a_parts, b_parts = [], [], []
    for start in range(0, model.n, ROW_BATCH):
        idx = np.arange(start, min(start + ROW_BATCH, model.n))
        l = np.asarray(model.loglik_rows(idx, theta_bar), dtype=float)
        g = np.asarray(model.grad_rows(idx, theta_bar), dtype=float)
        h = np.asarray(model.hess_rows(idx, theta_bar), dtype=float).reshape(idx.size, d * d)
        bad = ~(np.isfinite(l) & np.all(np.isfinite(g), axis=1) & np.all(np.isfinite(h), axis=1))
        if bad.any():
            first = int(idx[np.argmax(bad)]) + offset
            raise FloatingPointError(f"non-finite likelihood contribution at unit {first}")
        l_parts.append(math.fsum(l))
        a_parts.append(_exact_colsum(g))
        b_parts.append(_exact_colsum(h))
    A = _exact_colsum(np.array(a_parts)) if a_parts else np.zeros(d)
    B = _exact_colsum(np.array(b_parts)).reshape(d, d) if b_parts else np.zeros((d, d))
    return ChunkPartial(model.n, math.fsum(l_parts), A, 0.5 * (B + B.T))


def build_control_variates(
    data: Model | Iterable[Model], theta_bar, fingerprint: int = 0
) -> ControlVariateCache:
    """Exact full-data sums of unit log-likelihoods, gradients and Hessians.

    ``data`` is either a model or an iterable of per-chunk models; partial
    sums are combined in iteration order.
    """
    chunks = [data] if isinstance(data, Model) else data
    theta_bar = np.asarray(theta_bar, dtype=float)
    if not np.all(np.isfinite(theta_bar)):
        raise ValueError("central value must be finite")
    partials: list[ChunkPartial] = []
    offset = 0
    for chunk in chunks:
        partials.append(_chunk_partial(chunk, theta_bar, offset))
        offset += chunk.n
    if not partials:
        raise ValueError("no data")
    return combine_partials(theta_bar, partials, fingerprint)


def combine_partials(theta_bar, partials: list[ChunkPartial], fingerprint: int = 0) -> ControlVariateCache:
    A = _exact_colsum(np.array([p.A for p in partials]))
    d = A.size
    B = _exact_colsum(np.array([p.B.reshape(-1) for p in partials])).reshape(d, d)
    l_bar = math.fsum(p.l_sum for p in partials)
    n = sum(p.n for p in partials)
    return ControlVariateCache(
        np.asarray(theta_bar, dtype=float).copy(), A, 0.5 * (B + B.T), l_bar, n, fingerprint, list(partials)
    )


# ------------------------------------------------------------- estimators


def loglik_and_grad_rows(source: Model, idx, theta):
    """Exact or estimated unit log-likelihoods and gradients at per-draw ``theta``."""
    if hasattr(source, "loglik_grad_rows"):
        return source.loglik_grad_rows(idx, theta)
    th = np.asarray(theta, dtype=float)[:, None, :]
    return source.loglik_rows(idx, th), source.grad_rows(idx, th)


def residual_terms(source: Model, cache: ControlVariateCache, idx, theta, with_loglik: bool = True):
    """Gradient and log-likelihood residuals ``d_k`` and ``r_k`` for sampled rows.

    ``idx`` is ``(S, m)`` and ``theta`` is ``(S, d)``.  Returns ``(dg, dl)`` of
    shapes ``(S, m, d)`` and ``(S, m)`` (``dl`` is ``None`` when not needed).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 2 or theta.shape[1] != cache.dim:
        raise ValueError("theta must have shape (S, d)")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= cache.n):
        raise IndexError("subsample index out of range")
    if source.n != cache.n:
        raise ValueError(f"cache built for n={cache.n} but the data has n={source.n}")
    l, g = loglik_and_grad_rows(source, idx, theta)
    l0, g0, hd = cache.taylor_terms(source, idx, theta)
    dg = g - g0 - hd
    if not with_loglik:
        return dg, None
    delta = (theta - cache.theta_bar)[:, None, :]
    q = l0 + np.einsum("smj,smj->sm", g0, delta) + 0.5 * np.einsum("smj,smj->sm", hd, delta)
    return dg, l - q


def estimate_gradient(source: Model, theta, cache: ControlVariateCache, plan: SubsamplePlan) -> GradientEstimate:
    """Difference estimator of the full-data gradient from one plan."""
    if plan.n != cache.n:
        raise ValueError("plan and cache disagree on n")
    theta = np.asarray(theta, dtype=float)
    dg, _ = residual_terms(source, cache, plan.indices[None, :], theta[None, :], with_loglik=False)
    terms = cache.n * dg[0]
    value = cache.control_gradient(theta) + terms.mean(axis=0)
    var = terms.var(axis=0, ddof=1) if plan.m > 1 else np.zeros(cache.dim)
    return GradientEstimate(value, plan.m, var)


def estimate_loglik(source: Model, theta, cache: ControlVariateCache, plan: SubsamplePlan) -> float:
    """Difference estimator of the full-data log-likelihood from one plan."""
    if plan.n != cache.n:
        raise ValueError("plan and cache disagree on n")
    theta = np.asarray(theta, dtype=float)
    _, dl = residual_terms(source, cache, plan.indices[None, :], theta[None, :])
    return float(cache.control_loglik(theta) + cache.n * dl[0].mean())


def chunk_offsets(chunk_sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(chunk_sizes)]).astype(np.int64)


def chunked_estimate_gradient(
    source: Model, theta, cache: ControlVariateCache, chunk_sizes: Sequence[int], plans: Sequence[SubsamplePlan]
) -> GradientEstimate:
    """Sum of per-chunk difference estimators.

    ``plans[k]`` indexes rows of chunk ``k`` locally.  The control-variate
    part of each chunk estimate adds up to ``w(theta)``, so the aggregate is
    ``w(theta) + sum_k (n_k/m_k) sum_i d_{u_ki}(theta)``.
    """
    sizes = np.asarray(chunk_sizes, dtype=np.int64)
    if sizes.sum() != cache.n or len(plans) != sizes.size:
        raise ValueError("chunk layout does not match the cache")
    offsets = chunk_offsets(sizes)
    theta = np.asarray(theta, dtype=float)
    value = cache.control_gradient(theta).copy()
    est_var = np.zeros(cache.dim)
    m_total = 0
    for k, plan in enumerate(plans):
        if plan.n != sizes[k]:
            raise ValueError(f"plan {k} drawn for {plan.n} rows, chunk has {sizes[k]}")
        if plan.m == 0:
            if sizes[k]:
                raise ValueError(f"chunk {k} is non-empty but has no subsample")
            continue
        gidx = plan.indices + offsets[k]
        dg, _ = residual_terms(source, cache, gidx[None, :], theta[None, :], with_loglik=False)
        terms = sizes[k] * dg[0]
        value += terms.mean(axis=0)
        if plan.m > 1:
            est_var += terms.var(axis=0, ddof=1) / plan.m
        m_total += plan.m
    return GradientEstimate(value, m_total, est_var * m_total)


def dataset_fingerprint(*arrays) -> int:
    """64-bit content hash of in-memory arrays."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=float)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return int.from_bytes(h.digest()[:8], "little")


class SubsampledGradient:
    """Draw-vectorized gradient and log-likelihood estimator for the optimizer.

    Each call draws an independent subsample per parameter draw.  With
    ``chunk_sizes`` the subsample is stratified by chunk with the sizes from
    :func:`allocate_subsample`.
    """

    def __init__(self, source: Model, cache: ControlVariateCache, m: int, chunk_sizes=None, batch: int = 64):
        if m < 1:
            raise ValueError("subsample size must be positive")
        self.source = source
        self.cache = cache
        self.m = int(m)
        self.batch = batch
        self.n = cache.n
        if chunk_sizes is None:
            self.chunk_sizes = None
            self.weights = np.full(self.m, float(self.n) / self.m)
        else:
            sizes = np.asarray(chunk_sizes, dtype=np.int64)
            if sizes.sum() != self.n:
                raise ValueError("chunk sizes do not add up to n")
            self.chunk_sizes = sizes
            self.mk = allocate_subsample(sizes, self.m)
            self.offsets = chunk_offsets(sizes)
            self.weights = np.repeat(np.where(self.mk > 0, sizes / np.maximum(self.mk, 1), 0.0), self.mk)

    def draw_indices(self, S: int, rng: np.random.Generator) -> np.ndarray:
        if self.chunk_sizes is None:
            return rng.integers(0, self.n, size=(S, self.m))
        cols = []
        for k, mk in enumerate(self.mk):
            if mk:
                cols.append(self.offsets[k] + rng.integers(0, self.chunk_sizes[k], size=(S, mk)))
        return np.concatenate(cols, axis=1)

    def __call__(self, thetas, rng: np.random.Generator, with_loglik: bool = True):
        """Return ``(G, ll)`` with one gradient and log-likelihood estimate per row of ``thetas``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        S = thetas.shape[0]
        idx = self.draw_indices(S, rng)
        G = np.empty_like(thetas)
        ll = np.empty(S) if with_loglik else None
        for start in range(0, S, self.batch):
            sl = slice(start, min(start + self.batch, S))
            dg, dl = residual_terms(self.source, self.cache, idx[sl], thetas[sl], with_loglik)
            G[sl] = self.cache.control_gradient(thetas[sl]) + np.einsum("m,smj->sj", self.weights, dg)
            if with_loglik:
                ll[sl] = self.cache.control_loglik(thetas[sl]) + dl @ self.weights
        return G, ll
