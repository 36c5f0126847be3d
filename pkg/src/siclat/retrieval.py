"""Cosine-similarity kNN retrieval of demonstrations, with leave-one-out exclusion.

The index is an exhaustive scan over dense vectors (pools are small at desk
scale), so results are exact and oracle-testable. Embeddings either come
precomputed from a sidecar file or from a deterministic character n-gram
hashing embedder standing in for an external text-embedding model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import ManifestError, Sample

EMB_MAGIC = b"SICLEMB1"


class RetrievalError(Exception):
    pass


@dataclass(frozen=True)
class RetrievalResult:
    """Ordered (sample_id, cosine similarity) hits, best first."""

    hits: tuple[tuple[str, float], ...]

    def __post_init__(self):
        scores = [s for _, s in self.hits]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            raise RetrievalError("similarities must be non-increasing")
        ids = [i for i, _ in self.hits]
        if len(set(ids)) != len(ids):
            raise RetrievalError("duplicate ids in result")

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.hits]

    def __len__(self) -> int:
        return len(self.hits)

    def __iter__(self):
        return iter(self.hits)


class EmbeddingIndex:
    """Immutable dense-vector index answering exact cosine kNN queries."""

    def __init__(self, dim: int):
        if dim < 1:
            raise RetrievalError("dim must be positive")
        self.dim = dim
        self._ids: list[str] = []
        self._rows: dict[str, int] = {}
        self._vectors: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self._norms: np.ndarray | None = None

    def _insert(self, sample_id: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise RetrievalError(
                f"vector for {sample_id!r} has shape {vec.shape}, index dim is {self.dim}"
            )
        if sample_id in self._rows:
            raise RetrievalError(f"duplicate id {sample_id!r}")
        if not np.isfinite(vec).all():
            raise RetrievalError(f"non-finite vector for {sample_id!r}")
        if float(np.dot(vec, vec)) == 0.0:
            raise RetrievalError(f"zero vector for {sample_id!r}")
        self._rows[sample_id] = len(self._ids)
        self._ids.append(sample_id)
        self._vectors.append(vec)

    def _freeze(self) -> None:
        self._matrix = np.stack(self._vectors, axis=0)
        self._norms = np.linalg.norm(self._matrix, axis=1)
        self._vectors = []

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._rows

    def vector(self, sample_id: str) -> np.ndarray:
        assert self._matrix is not None
        return self._matrix[self._rows[sample_id]]

    @property
    def ids(self) -> list[str]:
        return list(self._ids)


def build_index(samples: Iterable[tuple[str, np.ndarray]]) -> EmbeddingIndex:
    """Build an index over (id, vector) pairs; rejects mismatched/zero/duplicate."""
    samples = list(samples)
    if not samples:
        raise RetrievalError("no vectors to index")
    dim = int(np.asarray(samples[0][1]).shape[-1])
    index = EmbeddingIndex(dim)
    for sample_id, vec in samples:
        index._insert(sample_id, vec)
    index._freeze()
    return index


def knn(
    index: EmbeddingIndex,
    query_vec: np.ndarray,
    k: int,
    exclude: frozenset[str] | set[str] = frozenset(),
) -> RetrievalResult:
    """The k ids maximizing cosine similarity, ties broken by ascending id.

    Exact: equivalent to scoring every stored vector and sorting.
    """
    if k < 1:
        raise RetrievalError("k must be >= 1")
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (index.dim,):
        raise RetrievalError(f"query has shape {q.shape}, index dim is {index.dim}")
    qnorm = float(np.linalg.norm(q))
    if qnorm == 0.0:
        raise RetrievalError("zero query vector")
    assert index._matrix is not None and index._norms is not None
    sims = (index._matrix @ q) / (index._norms * qnorm)

    excluded_rows = [index._rows[i] for i in exclude if i in index._rows]
    effective = len(index) - len(excluded_rows)
    if k > effective:
        raise RetrievalError(f"k={k} exceeds effective pool of {effective}")
    if excluded_rows:
        sims = sims.copy()
        sims[excluded_rows] = -np.inf

    # Exact top-k with ascending-id tie-break: partition down to the k-th
    # score, then fully order every candidate at or above it.
    kth = np.partition(sims, len(sims) - k)[len(sims) - k]
    candidates = np.flatnonzero(sims >= kth)
    ordered = sorted(candidates, key=lambda r: (-sims[r], index._ids[r]))[:k]
    return RetrievalResult(tuple((index._ids[r], float(sims[r])) for r in ordered))


def fallback_embed(text: str, dim: int = 64) -> np.ndarray:
    """Deterministic signed character-3-gram hashing embedding, L2-normalized.

    Identical texts map to identical vectors, and texts sharing character
    3-grams land in shared hash buckets, pushing their cosine similarity up.
    """
    if dim < 8:
        raise RetrievalError("dim must be >= 8")
    if not text:
        raise RetrievalError("cannot embed empty text")
    grams = [text[i : i + 3] for i in range(len(text) - 2)] or [text]
    vec = np.zeros(dim, dtype=np.float64)
    for gram in grams:
        h = int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "little")
        sign = 1.0 if (h >> 63) & 1 else -1.0
        vec[h % dim] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:  # signed counts can cancel on tiny inputs
        h = int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")
        vec[h % dim] = 1.0
        norm = 1.0
    return vec / norm


def write_embeddings(path: str | Path, ids: Sequence[str], matrix: np.ndarray) -> None:
    """Precomputed-embedding file: 16-byte header, float32 matrix, JSON row-id table."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError("matrix must be (len(ids), dim)")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())
        fh.write(json.dumps(list(ids)).encode("utf-8"))


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != EMB_MAGIC:
            raise ManifestError(f"{path}: bad magic {magic!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4")
        if data.size != rows * cols:
            raise ManifestError(f"{path}: truncated payload")
        ids = json.loads(fh.read().decode("utf-8"))
    if len(ids) != rows:
        raise ManifestError(f"{path}: id table length {len(ids)} != rows {rows}")
    return list(ids), data.reshape(rows, cols).astype(np.float64)


def build_pool_index(
    pool: Sequence[Sample],
    dim: int = 64,
    precomputed: Mapping[str, np.ndarray] | None = None,
) -> EmbeddingIndex:
    """Index a demonstration pool; precomputed vectors override the fallback embedder."""
    pairs = []
    for s in pool:
        if precomputed is not None and s.id in precomputed:
            pairs.append((s.id, np.asarray(precomputed[s.id], dtype=np.float64)))
        else:
            pairs.append((s.id, fallback_embed(s.retrieval_key(), dim=dim)))
    return build_index(pairs)


def query_vector(
    sample: Sample,
    index: EmbeddingIndex,
    precomputed: Mapping[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Retrieval vector for a query: precomputed, else its pool vector, else fallback."""
    if precomputed is not None and sample.id in precomputed:
        return np.asarray(precomputed[sample.id], dtype=np.float64)
    if sample.id in index:
        return index.vector(sample.id)
    return fallback_embed(sample.retrieval_key(), dim=index.dim)
