"""Embedding storage, exact nearest-neighbor search, and two-stage retrieval.

Search is exhaustive cosine similarity over the store (pools here are at
most ~10^5, so exactness and determinism beat an approximate index), with
ties broken by ascending record id. The two-stage retrieval first narrows
to the 3k text-nearest training records, then re-ranks that pool by
similarity in the normalized-vitals space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .dataset import VITAL_FIELDS, Dataset, TriageRecord


class RetrievalError(Exception):
    pass


class DimensionMismatchError(RetrievalError):
    pass


class ZeroVectorError(RetrievalError):
    pass


class KTooLargeError(RetrievalError):
    pass


class MissingEmbeddingError(RetrievalError):
    pass


class PoolTooSmallError(RetrievalError):
    pass


class EmbeddingStore:
    """Immutable-after-build map of record id to fixed-dimension vector."""

    def __init__(self, dimension: int):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension
        self._entries: dict[str, np.ndarray] = {}

    def add(self, record_id: str, vector: Sequence[float]) -> None:
        arr = np.asarray(vector, dtype=np.float64)
        if arr.shape != (self.dimension,):
            raise DimensionMismatchError(
                f"vector for {record_id!r} has shape {arr.shape}, store dimension {self.dimension}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"vector for {record_id!r} has non-finite entries")
        self._entries[record_id] = arr

    def get(self, record_id: str) -> np.ndarray:
        try:
            return self._entries[record_id]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding for record {record_id!r}")

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> tuple[str, ...]:
        return tuple(self._entries)

    def save(self, path: str | Path) -> None:
        """Line-delimited JSON: a header declaring the dimension, then
        one {id, vector} record per line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"dimension": self.dimension}) + "\n")
            for record_id in sorted(self._entries):
                row = {"id": record_id, "vector": self._entries[record_id].tolist()}
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            store = cls(dimension=int(header["dimension"]))
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    store.add(row["id"], row["vector"])
        return store


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionMismatchError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVectorError("cosine similarity undefined for an all-zero vector")
    return float(np.dot(va, vb)) / (norm_a * norm_b)


def _safe_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine with the convention sim = 0 when either vector is all-zero.

    Needed for vitals vectors: a record whose every slot is missing maps to
    the zero vector under mean imputation.
    """
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (norm_a * norm_b)


def knn(store: EmbeddingStore, query: Sequence[float], k: int) -> list[str]:
    """Ids of the k most-similar entries, best first; ties by ascending id."""
    if k > len(store):
        raise KTooLargeError(f"k={k} exceeds store size {len(store)}")
    query_arr = np.asarray(query, dtype=np.float64)
    scored = [(-(cosine_similarity(query_arr, store.get(rid))), rid) for rid in store.ids()]
    scored.sort()
    return [rid for _, rid in scored[:k]]


@dataclass(frozen=True)
class VitalsNormalizer:
    """Per-component z-score parameters fitted on a training set.

    Components are the six vitals plus pain. Means and population standard
    deviations (divide by n) come from the present values in the training
    set; components that are constant (or entirely absent) are degenerate
    and dropped from every vector. Missing values impute to the training
    mean, i.e. contribute 0 after z-scoring.
    """

    components: tuple[str, ...]
    means: tuple[float, ...]
    std_devs: tuple[float, ...]
    degenerate: tuple[str, ...]

    @property
    def dimension(self) -> int:
        return len(self.components)


def _component_values(record: TriageRecord, name: str) -> Optional[float]:
    if name == "pain":
        return None if record.pain is None else float(record.pain)
    return record.vitals.get(name)


def fit_normalizer(train: Dataset | Iterable[TriageRecord]) -> VitalsNormalizer:
    records = list(train)
    if not records:
        raise ValueError("cannot fit a normalizer on an empty training set")
    names = (*VITAL_FIELDS, "pain")
    components, means, stds, degenerate = [], [], [], []
    for name in names:
        values = [v for r in records if (v := _component_values(r, name)) is not None]
        if not values:
            degenerate.append(name)
            continue
        mean = sum(values) / len(values)
        var = sum((v - mean) ** 2 for v in values) / len(values)
        std = var**0.5
        if std == 0.0:
            degenerate.append(name)
            continue
        components.append(name)
        means.append(mean)
        stds.append(std)
    return VitalsNormalizer(
        components=tuple(components),
        means=tuple(means),
        std_devs=tuple(stds),
        degenerate=tuple(degenerate),
    )


def vitals_vector(record: TriageRecord, normalizer: VitalsNormalizer) -> np.ndarray:
    out = np.zeros(normalizer.dimension, dtype=np.float64)
    for i, name in enumerate(normalizer.components):
        value = _component_values(record, name)
        if value is not None:
            out[i] = (value - normalizer.means[i]) / normalizer.std_devs[i]
    return out


def text_similarity_ranking(
    query: TriageRecord,
    train: Dataset,
    text_store: EmbeddingStore,
    exclude_ids: frozenset[str] = frozenset(),
) -> list[TriageRecord]:
    """All candidate training records sorted by text similarity, best first.

    This is the stage-1 ordering; it depends only on the query and the
    store, so callers sweeping over k can compute it once and slice.
    """
    candidates = [r for r in train if r.id not in exclude_ids and r.id != query.id]
    for r in candidates:
        if r.id not in text_store:
            raise MissingEmbeddingError(f"no text embedding for training record {r.id!r}")
    if query.id not in text_store:
        raise MissingEmbeddingError(f"no text embedding for query record {query.id!r}")
    query_vec = text_store.get(query.id)
    return sorted(
        candidates,
        key=lambda r: (-cosine_similarity(query_vec, text_store.get(r.id)), r.id),
    )


def rerank_by_vitals(
    pool: Sequence[TriageRecord],
    query: TriageRecord,
    normalizer: VitalsNormalizer,
    k: int,
) -> list[TriageRecord]:
    """Stage 2: top k of the pool by normalized-vitals cosine similarity."""
    query_vitals = vitals_vector(query, normalizer)
    ranked = sorted(
        pool,
        key=lambda r: (-_safe_cosine(query_vitals, vitals_vector(r, normalizer)), r.id),
    )
    return ranked[:k]


def kate_retrieve(
    query: TriageRecord,
    train: Dataset,
    text_store: EmbeddingStore,
    normalizer: VitalsNormalizer,
    k: int,
    exclude_ids: frozenset[str] = frozenset(),
) -> list[TriageRecord]:
    """Two-stage example retrieval, most similar first.

    Stage 1 takes the 3k training records whose text embeddings are nearest
    the query's; stage 2 re-ranks that pool by cosine similarity between
    normalized vitals vectors and keeps the top k. Both stages break ties
    by ascending id, so the result is deterministic.
    """
    ranking = text_similarity_ranking(query, train, text_store, exclude_ids)
    pool_size = 3 * k
    if pool_size > len(ranking):
        raise PoolTooSmallError(
            f"stage-1 pool of {pool_size} exceeds {len(ranking)} available training records"
        )
    return rerank_by_vitals(ranking[:pool_size], query, normalizer, k)
