"""Chunked on-disk datasets with streaming map/reduce and random row access.

Chunks are CSV files with a header row.  Logistic chunks hold ``y,x1..xp``;
panel chunks hold ``panel_id,t,y,x1..xp`` with every panel kept inside one
chunk.  A plain-text manifest lists the chunks in order.  On first access
each chunk gets a binary copy (row-major little-endian float64) with a
small sidecar giving its shape, which makes row fetches O(1) seeks.

Unit indices are 0-based throughout; for panels a unit is a whole panel.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np

from .models import LogisticRegressionModel, Model, PanelLogisticModel

LOGISTIC = "LOGISTIC"
PANEL = "PANEL"
MANIFEST_NAME = "manifest.txt"
_MASK64 = (1 << 64) - 1


class ChunkError(IOError):
    """A chunk file is missing, unreadable or inconsistent with the manifest."""

    def __init__(self, message, chunk: int | None = None):
        super().__init__(message)
        self.chunk = chunk


class SchemaError(ValueError):
    """Rows violate the CSV schema."""


@dataclass(frozen=True)
class ChunkDescriptor:
    path: str
    units: int
    rows: int
    digest: str


@dataclass
class ChunkManifest:
    schema: str
    p: int
    chunks: list[ChunkDescriptor]
    content: int
    root: Path = field(default=Path("."))
    T: int = 0

    @property
    def n(self) -> int:
        return sum(c.units for c in self.chunks)

    @property
    def unit_counts(self) -> list[int]:
        return [c.units for c in self.chunks]

    @property
    def dim(self) -> int:
        """Model parameter dimension (intercept included; panels add ``gamma``)."""
        return self.p + 1 + (1 if self.schema == PANEL else 0)

    @property
    def fingerprint(self) -> int:
        """64-bit hash of the ordered chunk hashes."""
        h = hashlib.sha256("".join(c.digest for c in self.chunks).encode())
        return int.from_bytes(h.digest()[:8], "little")

    def chunk_path(self, k: int) -> Path:
        return self.root / self.chunks[k].path

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        with open(path, "w") as fh:
            fh.write(f"schema {self.schema}\n")
            fh.write(f"n {self.n}\n")
            fh.write(f"p {self.p}\n")
            if self.schema == PANEL:
                fh.write(f"T {self.T}\n")
            fh.write(f"content {self.content:016x}\n")
            for c in self.chunks:
                fh.write(f"chunk {c.path} {c.units} {c.rows} {c.digest}\n")
        return path

    @classmethod
    def load(cls, path) -> "ChunkManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        meta: dict[str, str] = {}
        chunks = []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "chunk":
                    chunks.append(ChunkDescriptor(parts[1], int(parts[2]), int(parts[3]), parts[4]))
                else:
                    meta[parts[0]] = parts[1]
        m = cls(meta["schema"], int(meta["p"]), chunks, int(meta["content"], 16), path.parent, int(meta.get("T", 0)))
        if m.n != int(meta["n"]):
            raise ChunkError(f"{path}: chunk units add up to {m.n}, header says {meta['n']}")
        return m


# ------------------------------------------------------------------ writing


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _unit_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _fmt(a: np.ndarray) -> list[str]:
    # shortest repr that round-trips
    return [",".join(repr(float(v)) for v in row) for row in a]


def write_chunks(data, rows_per_chunk: int, directory, shuffle: bool = False, seed=None) -> ChunkManifest:
    """Write ``data`` as CSV chunks plus a manifest.

    ``data`` is a ``(X, y)`` pair: logistic ``X`` is ``(n, p + 1)`` and panel
    ``X`` is ``(n, T, p + 1)``, both with the intercept column first (it is
    not written).  ``rows_per_chunk`` counts units, so panels stay whole.
    """
    X, y = (data.X, data.y) if hasattr(data, "X") else data
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if rows_per_chunk < 1:
        raise ValueError("rows_per_chunk must be positive")
    schema = PANEL if X.ndim == 3 else LOGISTIC
    if schema == LOGISTIC and (X.ndim != 2 or y.shape != (X.shape[0],)):
        raise SchemaError("logistic data needs X (n, p+1) and y (n,)")
    if schema == PANEL and y.shape != X.shape[:2]:
        raise SchemaError("panel data needs X (n, T, p+1) and y (n, T)")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise SchemaError("responses must be 0 or 1")
    if X.shape[-1] < 1 or (X.size and not np.all(X[..., 0] == 1.0)):
        raise SchemaError("first column of X must be the intercept")
    n = X.shape[0]
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = X.shape[-1] - 1
    xcols = [f"x{j + 1}" for j in range(p)]
    header = ",".join((["y"] if schema == LOGISTIC else ["panel_id", "t", "y"]) + xcols)
    content = 0
    chunks = []
    starts = range(0, n, rows_per_chunk) if n else [0]
    for k, a in enumerate(starts):
        units = order[a : a + rows_per_chunk]
        name = f"chunk_{k:05d}.csv"
        lines = []
        if schema == LOGISTIC:
            for text in _fmt(np.column_stack([y[units], X[units, 1:]])):
                content = (content + _unit_hash(text)) & _MASK64
                lines.append(text)
        else:
            T = X.shape[1]
            for i in units:
                body = _fmt(np.column_stack([y[i], X[i, :, 1:]]))
                # content hash ignores the panel label
                content = (content + _unit_hash("\n".join(body))) & _MASK64
                lines.extend(f"{int(i)},{t}," + b for t, b in enumerate(body))
        with open(directory / name, "w") as fh:
            fh.write(header + "\n")
            for text in lines:
                fh.write(text + "\n")
        _drop_binary(directory / name)
        chunks.append(ChunkDescriptor(name, len(units), len(lines), _file_digest(directory / name)))
    T = X.shape[1] if schema == PANEL else 0
    manifest = ChunkManifest(schema, p, chunks, content, directory, T)
    manifest.save()
    return manifest


# ------------------------------------------------------------------ reading


def _binary_paths(csv_path: Path):
    return csv_path.with_suffix(".f8"), csv_path.with_suffix(".f8.idx")


def _drop_binary(csv_path: Path):
    for p in _binary_paths(csv_path):
        if p.exists():
            p.unlink()


def _parse_csv(path: Path, manifest: ChunkManifest, k: int) -> np.ndarray:
    ncol = manifest.p + (1 if manifest.schema == LOGISTIC else 3)
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if len(header) != ncol:
                raise SchemaError(f"{path}: expected {ncol} columns, header has {len(header)}")
            rows = []
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                fields = line.split(",")
                if len(fields) != ncol:
                    raise SchemaError(f"{path}:{lineno}: ragged row with {len(fields)} fields")
                rows.append([float(v) for v in fields])
    except OSError as exc:
        raise ChunkError(f"cannot read chunk {k} ({path}): {exc}", k) from exc
    a = np.array(rows, dtype=float).reshape(-1, ncol)
    ycol = 0 if manifest.schema == LOGISTIC else 2
    if not np.all((a[:, ycol] == 0.0) | (a[:, ycol] == 1.0)):
        raise SchemaError(f"{path}: response values must be 0 or 1")
    if manifest.schema == PANEL and a.shape[0]:
        T = manifest.T
        if T < 1 or a.shape[0] % T:
            raise SchemaError(f"{path}: row count {a.shape[0]} is not a multiple of T={T}")
        block = a.reshape(-1, T, ncol)
        if not (np.all(block[:, :, 0] == block[:, :1, 0]) and np.all(block[:, :, 1] == np.arange(T))):
            raise SchemaError(f"{path}: rows must be grouped by panel_id with t = 0..{T - 1} ascending")
    if a.shape[0] != manifest.chunks[k].rows:
        raise ChunkError(f"chunk {k}: manifest lists {manifest.chunks[k].rows} rows, file has {a.shape[0]}", k)
    return a


def chunk_table(manifest: ChunkManifest, k: int) -> np.ndarray:
    """Numeric content of chunk ``k`` as a memory-mapped ``(rows, columns)`` array."""
    if not 0 <= k < len(manifest.chunks):
        raise ChunkError(f"no chunk {k}", k)
    csv_path = manifest.chunk_path(k)
    bin_path, idx_path = _binary_paths(csv_path)
    if not idx_path.exists():
        if not csv_path.exists():
            raise ChunkError(f"chunk {k} missing: {csv_path}", k)
        if _file_digest(csv_path) != manifest.chunks[k].digest:
            raise ChunkError(f"chunk {k} ({csv_path}) does not match its manifest digest", k)
        a = _parse_csv(csv_path, manifest, k)
        a.astype("<f8").tofile(bin_path)
        with open(idx_path, "w") as fh:
            fh.write(f"{a.shape[0]} {a.shape[1]}\n")
    with open(idx_path) as fh:
        rows, cols = (int(v) for v in fh.read().split())
    if rows == 0:
        return np.zeros((0, cols))
    return np.memmap(bin_path, dtype="<f8", mode="r", shape=(rows, cols))


def _to_arrays(manifest: ChunkManifest, table: np.ndarray):
    if manifest.schema == LOGISTIC:
        X = np.empty((table.shape[0], manifest.p + 1))
        X[:, 0] = 1.0
        X[:, 1:] = table[:, 1:]
        return X, np.array(table[:, 0])
    T = manifest.T
    k = table.shape[0] // T
    block = np.asarray(table).reshape(k, T, -1)
    X = np.empty((k, T, manifest.p + 1))
    X[..., 0] = 1.0
    X[..., 1:] = block[..., 3:]
    return X, block[..., 2].copy()


def chunk_arrays(manifest: ChunkManifest, k: int):
    """``(X, y)`` of chunk ``k`` with the intercept column restored."""
    return _to_arrays(manifest, chunk_table(manifest, k))


def _model(manifest: ChunkManifest, X, y) -> Model:
    return LogisticRegressionModel(X, y) if manifest.schema == LOGISTIC else PanelLogisticModel(X, y)


def iter_chunk_models(manifest: ChunkManifest) -> Iterator[Model]:
    for k in range(len(manifest.chunks)):
        yield _model(manifest, *chunk_arrays(manifest, k))


def load_model(manifest: ChunkManifest) -> Model:
    """Whole dataset as one in-memory model."""
    parts = [chunk_arrays(manifest, k) for k in range(len(manifest.chunks))]
    X = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    return _model(manifest, X, y)


def stream_map_reduce(
    manifest: ChunkManifest, map_fn: Callable[[Model, int], Any], combine: Callable[[Any, Any], Any], initial=None
):
    """Map every chunk (as a model) and fold the partials in manifest order."""
    acc = initial
    for k in range(len(manifest.chunks)):
        try:
            part = map_fn(_model(manifest, *chunk_arrays(manifest, k)), k)
        except (OSError, SchemaError) as exc:
            raise ChunkError(f"chunk {k} failed: {exc}", k) from exc
        acc = part if acc is None else combine(acc, part)
    return acc


def fetch_rows(manifest: ChunkManifest, indices):
    """``(X, y)`` for the requested units in request order (duplicates allowed)."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = manifest.n
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"unit index out of range [0, {n})")
    offsets = np.concatenate([[0], np.cumsum(manifest.unit_counts)])
    which = np.searchsorted(offsets, idx, side="right") - 1
    per = 1 if manifest.schema == LOGISTIC else manifest.T
    ncol = manifest.p + (1 if manifest.schema == LOGISTIC else 3)
    table = np.empty((idx.size * per, ncol))
    for k in np.unique(which):
        sel = np.flatnonzero(which == k)
        local = idx[sel] - offsets[k]
        src = chunk_table(manifest, int(k))
        rows = (local[:, None] * per + np.arange(per)).reshape(-1)
        dest = (sel[:, None] * per + np.arange(per)).reshape(-1)
        table[dest] = src[rows]
    return _to_arrays(manifest, table)


class FetchingLogisticModel(Model):
    """Logistic model whose rows are read from the chunk store on demand."""

    def __init__(self, manifest: ChunkManifest):
        if manifest.schema != LOGISTIC:
            raise ValueError("fetching model supports the logistic schema only")
        self.manifest = manifest
        self.n = manifest.n
        self.dim = manifest.p + 1

    def _local(self, idx):
        idx = self._check_index(idx)
        X, y = fetch_rows(self.manifest, idx)
        return LogisticRegressionModel(X, y), np.arange(idx.size).reshape(idx.shape)

    def loglik_rows(self, idx, theta):
        m, loc = self._local(idx)
        return m.loglik_rows(loc, theta)

    def grad_rows(self, idx, theta):
        m, loc = self._local(idx)
        return m.grad_rows(loc, theta)

    def hess_rows(self, idx, theta):
        m, loc = self._local(idx)
        return m.hess_rows(loc, theta)

    def hvp_rows(self, idx, theta, v):
        m, loc = self._local(idx)
        return m.hvp_rows(loc, theta, v)

    def loglik_grad_rows(self, idx, theta):
        m, loc = self._local(idx)
        th = np.asarray(theta, dtype=float)[:, None, :]
        return m.loglik_rows(loc, th), m.grad_rows(loc, th)


def default_data_dir() -> Path:
    """Data directory from ``VBILL_DATA_DIR`` (current directory otherwise)."""
    return Path(os.environ.get("VBILL_DATA_DIR", "."))
