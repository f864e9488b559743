"""Scrambled Sobol' point sets and their normal transforms.

Points are generated in base 2 from the Joe & Kuo direction numbers shipped
in ``data/new-joe-kuo-6.1024``.  Randomization is Matousek's random linear
scrambling (a random unit lower-triangular binary matrix per coordinate)
followed by a uniform digital shift.  Both operations act on the direction
numbers, so a scrambled batch costs the same as an unscrambled one.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.special import ndtri

# Output resolution of a coordinate, in bits.
NBITS = 52
# Bits of the unscrambled direction numbers (sequence length up to 2**32).
DIRECTION_BITS = 32
_TABLE = "new-joe-kuo-6.1024"


@dataclass(frozen=True)
class PointBatch:
    """A batch of ``count`` points in ``(0, 1)**dim``."""

    points: np.ndarray
    seed: int | None
    scrambled: bool

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def read_direction_table(path=None) -> list[tuple[int, int, tuple[int, ...]]]:
    """Parse a Joe-Kuo direction-number file.

    Returns a list of ``(s, a, m)`` rows for dimensions 2, 3, ...; dimension 1
    (the van der Corput sequence) is implicit in the format.
    """
    if path is None:
        text = resources.files("vbill.data").joinpath(_TABLE).read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    rows = []
    for line in text.splitlines()[1:]:
        fields = line.split()
        if not fields:
            continue
        s, a = int(fields[1]), int(fields[2])
        m = tuple(int(x) for x in fields[3 : 3 + s])
        if len(m) != s:
            raise ValueError(f"malformed direction-number row: {line!r}")
        rows.append((s, a, m))
    return rows


@lru_cache(maxsize=1)
def _default_table():
    return read_direction_table()


def max_dimension() -> int:
    return len(_default_table()) + 1


@lru_cache(maxsize=64)
def direction_numbers(dim: int) -> np.ndarray:
    """Direction numbers as ``(dim, DIRECTION_BITS)`` integers scaled to NBITS bits.

    Entry ``[j, k]`` is ``m_{k+1} * 2**(NBITS - k - 1)`` for coordinate ``j``.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    table = _default_table()
    if dim > len(table) + 1:
        raise ValueError(
            f"dimension {dim} exceeds the direction-number table ({len(table) + 1})"
        )
    L = DIRECTION_BITS
    V = np.zeros((dim, L), dtype=np.uint64)
    V[0] = [1 << (NBITS - k - 1) for k in range(L)]
    for j in range(1, dim):
        s, a, m_init = table[j - 1]
        m = list(m_init)
        for k in range(s, L):
            new = m[k - s] ^ (m[k - s] << s)
            for r in range(1, s):
                if (a >> (s - 1 - r)) & 1:
                    new ^= m[k - r] << r
            m.append(new)
        V[j] = [m[k] << (NBITS - k - 1) for k in range(L)]
    return V


def _check_count(S: int) -> int:
    if S < 1 or S & (S - 1):
        raise ValueError(f"number of points must be a power of 2, got {S}")
    return S.bit_length() - 1


def _combine(V: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """XOR of direction numbers selected by the binary digits of ``idx``.

    ``V`` has shape ``(..., dim, bits)``; returns ``(..., len(idx), dim)``.
    """
    out = np.zeros(V.shape[:-2] + (idx.size, V.shape[-2]), dtype=np.uint64)
    idx = idx.astype(np.uint64)
    for k in range(V.shape[-1]):
        bit = (idx >> np.uint64(k)) & np.uint64(1)
        if not bit.any():
            continue
        # all-ones where the digit is set
        mask = (np.uint64(0) - bit)[:, None]
        out ^= V[..., None, :, k] & mask
    return out


def _combine_range(V: np.ndarray, S: int) -> np.ndarray:
    """:func:`_combine` for indices ``0..S-1`` (``S`` a power of 2), built by doubling."""
    out = np.zeros(V.shape[:-2] + (S, V.shape[-2]), dtype=np.uint64)
    half = 1
    k = 0
    while half < S:
        np.bitwise_xor(out[..., :half, :], V[..., None, :, k], out=out[..., half : 2 * half, :])
        half *= 2
        k += 1
    return out


def _random_ltm_columns(rng: np.random.Generator, size) -> np.ndarray:
    """Columns of random unit lower-triangular binary matrices.

    Column ``b`` (for bit weight ``2**b``) keeps bit ``b`` and draws every
    lower-order bit uniformly; higher bits are zero.
    """
    raw = rng.integers(0, 1 << NBITS, size=tuple(size) + (NBITS,), dtype=np.uint64)
    weights = np.uint64(1) << np.arange(NBITS, dtype=np.uint64)
    return (raw & (weights - np.uint64(1))) | weights


def _scramble_directions(V: np.ndarray, rng: np.random.Generator, lead=()) -> np.ndarray:
    """Apply independent linear scrambles to direction numbers ``V`` (dim, bits)."""
    cols = _random_ltm_columns(rng, tuple(lead) + (V.shape[0],))
    out = np.zeros(tuple(lead) + V.shape, dtype=np.uint64)
    for b in range(NBITS):
        bit = ((V >> np.uint64(b)) & np.uint64(1)).astype(bool)
        if not bit.any():
            continue
        out ^= np.where(bit, cols[..., :, b, None], np.uint64(0))
    return out


_ONE_BITS = np.uint64(0x3FF0000000000000)


def _to_unit(ints: np.ndarray, centered: bool) -> np.ndarray:
    # 52-bit integers become the mantissa of a float in [1, 2); subtracting 1 is exact
    x = (ints | _ONE_BITS).view(np.float64)
    x -= 1.0
    if centered:
        x += 2.0 ** -(NBITS + 1)
    return x


def sobol_batch(dim: int, S: int, seed: int | None = None, scrambled: bool = True) -> PointBatch:
    """Generate ``S`` Sobol' points in ``dim`` dimensions.

    Unscrambled batches are points ``1..S`` of the sequence in natural
    (non-Gray) order, so the all-zero point is never produced.  Scrambled
    batches are points ``0..S-1`` after a linear scramble and digital shift
    drawn from ``seed``; coordinates sit at cell midpoints of the 2**-52 grid
    and are therefore strictly inside ``(0, 1)``.
    """
    k = _check_count(S)
    if k > DIRECTION_BITS:
        raise ValueError("too many points requested")
    V = direction_numbers(dim)
    if not scrambled:
        idx = np.arange(1, S + 1, dtype=np.uint64)
        return PointBatch(_to_unit(_combine(V, idx), centered=False), None, False)
    rng = np.random.default_rng(seed)
    Vs = _scramble_directions(V[:, : max(k, 1)], rng)
    shift = rng.integers(0, 1 << NBITS, size=dim, dtype=np.uint64)
    ints = _combine_range(Vs, S) ^ shift
    return PointBatch(_to_unit(ints, centered=True), seed, True)


def scrambled_batches(count: int, dim: int, S: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independently scrambled ``S``-point batches, shape ``(count, S, dim)``.

    Used where many small point sets are needed at once, e.g. one importance
    sampling set per panel.
    """
    k = _check_count(S)
    V = direction_numbers(dim)[:, : max(k, 1)]
    Vs = _scramble_directions(V, rng, lead=(count,))
    shift = rng.integers(0, 1 << NBITS, size=(count, 1, dim), dtype=np.uint64)
    ints = _combine_range(Vs, S)
    ints ^= shift
    return _to_unit(ints, centered=True)


def to_normal(points) -> np.ndarray:
    """Map points in ``(0, 1)`` to standard-normal draws coordinate-wise."""
    u = points.points if isinstance(points, PointBatch) else np.asarray(points, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("coordinates must lie strictly inside (0, 1)")
    return ndtri(u)
