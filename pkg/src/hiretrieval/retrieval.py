"""Exact kNN retrieval over a mutable embedding database and hierarchy-aware metrics.

Embeddings are unit-normalised on the way in, so Euclidean ranking agrees
with the cosine geometry the losses train.  Ties in distance are broken by
ascending record id, which makes every ranking independent of the order in
which records were ingested.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .hierarchy import HierarchicalLabel, level_key

logger = logging.getLogger(__name__)

# cap on float64 entries materialised per distance block
_BLOCK_ENTRIES = 4_000_000
# squared-distance slack when shortlisting by Gram products (rounding is ~1e-15)
_SHORTLIST_SLACK = 1e-9


class DuplicateIdError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class EmptyDatabaseError(ValueError):
    pass


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.sqrt(np.sum(x * x, axis=1))
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise ValueError("cannot normalise a zero-norm or non-finite embedding")
    return x / norms[:, None]


@dataclass
class LabeledSet:
    """Parallel arrays of ids, embeddings and labels (a query set or a dataset)."""

    ids: list[str]
    vectors: np.ndarray
    labels: list[HierarchicalLabel]

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if not (len(self.ids) == len(self.labels) == self.vectors.shape[0]):
            raise ValueError("ids, vectors and labels must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index: Sequence[int] | np.ndarray) -> "LabeledSet":
        index = np.asarray(index, dtype=np.int64)
        return LabeledSet(
            ids=[self.ids[i] for i in index],
            vectors=self.vectors[index],
            labels=[self.labels[i] for i in index],
        )

    def keys(self, level: int | None = None) -> list[str]:
        return [lab.path[-1] if level is None else level_key(lab, level) for lab in self.labels]

    def records(self) -> Iterable[tuple[str, np.ndarray, HierarchicalLabel]]:
        return zip(self.ids, self.vectors, self.labels)

    @classmethod
    def concat(cls, parts: Sequence["LabeledSet"]) -> "LabeledSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            ids=[i for p in parts for i in p.ids],
            vectors=np.vstack([p.vectors for p in parts]),
            labels=[lab for p in parts for lab in p.labels],
        )


@dataclass(frozen=True)
class Neighbor:
    id: str
    distance: float
    label: HierarchicalLabel


class EmbeddingDatabase:
    """Single-writer, multi-reader store of unit-norm embeddings.

    Reads may run concurrently; ``ingest`` needs exclusive access.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.ids: list[str] = []
        self.labels: list[HierarchicalLabel] = []
        self._vectors = np.zeros((0, dim))
        self._id_set: set[str] = set()
        self._order = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @classmethod
    def from_set(cls, data: LabeledSet) -> "EmbeddingDatabase":
        db = cls(data.vectors.shape[1])
        db.ingest(data.records())
        return db

    def ingest(self, samples: Iterable[tuple[str, np.ndarray, HierarchicalLabel]]) -> "EmbeddingDatabase":
        samples = list(samples)
        if not samples:
            return self
        new_ids = [str(s[0]) for s in samples]
        seen = set()
        for sid in new_ids:
            if sid in self._id_set or sid in seen:
                raise DuplicateIdError(f"id {sid!r} already present")
            seen.add(sid)
        vecs = np.atleast_2d(np.asarray([np.asarray(s[1], dtype=np.float64) for s in samples]))
        if vecs.shape[1] != self.dim:
            raise DimensionMismatchError(f"expected dimension {self.dim}, got {vecs.shape[1]}")
        vecs = normalize_rows(vecs)
        self.ids.extend(new_ids)
        self.labels.extend(s[2] for s in samples)
        self._vectors = np.vstack([self._vectors, vecs])
        self._id_set.update(new_ids)
        self._order = np.array(sorted(range(len(self.ids)), key=self.ids.__getitem__), dtype=np.int64)
        return self

    def keys(self, level: int | None = None) -> list[str]:
        return [lab.path[-1] if level is None else level_key(lab, level) for lab in self.labels]

    def _check_k(self, k: int) -> None:
        if len(self) == 0:
            raise EmptyDatabaseError("database is empty")
        if not 1 <= k <= len(self):
            raise ValueError(f"k={k} out of range for a database of {len(self)}")

    def ranked(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the ``k`` nearest records for each query row."""
        self._check_k(k)
        q = normalize_rows(queries)
        if q.shape[1] != self.dim:
            raise DimensionMismatchError(f"expected dimension {self.dim}, got {q.shape[1]}")
        stored = self._vectors[self._order]
        out_idx = np.empty((q.shape[0], k), dtype=np.int64)
        out_dist = np.empty((q.shape[0], k))
        chunk = max(1, _BLOCK_ENTRIES // len(self))
        for start in range(0, q.shape[0], chunk):
            block = q[start : start + chunk]
            # Gram-form squared distances only shortlist candidates; the final
            # ranking uses exact per-pair distances so ties stay bitwise stable
            approx = 2.0 - 2.0 * (block @ stored.T)
            kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
            for r, row in enumerate(block):
                cand = np.flatnonzero(approx[r] <= kth[r] + _SHORTLIST_SLACK)
                diff = stored[cand] - row
                dist = np.sqrt(np.sum(diff * diff, axis=1))
                # candidates are in id order, so a stable sort breaks ties by ascending id
                order = np.argsort(dist, kind="stable")[:k]
                out_idx[start + r] = self._order[cand[order]]
                out_dist[start + r] = dist[order]
        return out_idx, out_dist


def ingest(db: EmbeddingDatabase, samples: Iterable[tuple[str, np.ndarray, HierarchicalLabel]]) -> EmbeddingDatabase:
    return db.ingest(samples)


def knn_query(db: EmbeddingDatabase, query: np.ndarray, k: int) -> list[Neighbor]:
    idx, dist = db.ranked(np.asarray(query, dtype=np.float64)[None, :], k)
    return [Neighbor(db.ids[i], float(d), db.labels[i]) for i, d in zip(idx[0], dist[0])]


def _vote(keys: Sequence[str]) -> str:
    """Majority key; ties go to the tied key that appears nearest."""
    counts: dict[str, int] = {}
    for key in keys:
        counts[key] = counts.get(key, 0) + 1
    best = max(counts.values())
    for key in keys:
        if counts[key] == best:
            return key
    raise AssertionError("unreachable")


def classify(db: EmbeddingDatabase, query: np.ndarray, k: int = 1, level: int | None = None) -> str:
    neighbors = knn_query(db, query, k)
    return _vote([n.label.path[-1] if level is None else level_key(n.label, level) for n in neighbors])


def classify_many(db: EmbeddingDatabase, queries: np.ndarray, k: int = 1, level: int | None = None) -> list[str]:
    idx, _ = db.ranked(queries, k)
    keys = db.keys(level)
    return [_vote([keys[i] for i in row]) for row in idx]


def _check_queries(db: EmbeddingDatabase, queries: LabeledSet) -> None:
    if len(queries) == 0:
        raise ValueError("empty query set")
    clash = set(queries.ids) & set(db.ids)
    if clash:
        raise ValueError(f"queries overlap the database on {len(clash)} id(s), e.g. {sorted(clash)[0]!r}")


def precision_at_k(db: EmbeddingDatabase, queries: LabeledSet, k: int = 1, level: int | None = None) -> float:
    """Mean fraction of each query's top-``k`` neighbours sharing its level key."""
    _check_queries(db, queries)
    idx, _ = db.ranked(queries.vectors, k)
    db_keys = np.array(db.keys(level), dtype=object)
    q_keys = np.array(queries.keys(level), dtype=object)
    hits = db_keys[idx] == q_keys[:, None]
    return float(np.mean(hits.sum(axis=1) / k))


def map_at_r(
    db: EmbeddingDatabase,
    queries: LabeledSet,
    level: int | None = None,
    return_excluded: bool = False,
) -> float | tuple[float, int]:
    """Mean average precision at R, R being each query's count of same-key records.

    Queries whose key is absent from the database are skipped and counted.
    """
    _check_queries(db, queries)
    db_keys = db.keys(level)
    counts: dict[str, int] = {}
    for key in db_keys:
        counts[key] = counts.get(key, 0) + 1
    q_keys = queries.keys(level)
    r = np.array([counts.get(key, 0) for key in q_keys])
    keep = np.flatnonzero(r > 0)
    excluded = len(q_keys) - len(keep)
    if excluded:
        logger.warning("map_at_r: %d quer%s without a same-class record excluded", excluded, "y" if excluded == 1 else "ies")
    if len(keep) == 0:
        raise ValueError("no query has a same-class record in the database")
    r_max = int(r[keep].max())
    idx, _ = db.ranked(queries.vectors[keep], r_max)
    db_keys_arr = np.array(db_keys, dtype=object)
    q_arr = np.array(q_keys, dtype=object)[keep]
    rel = (db_keys_arr[idx] == q_arr[:, None]).astype(np.float64)
    ranks = np.arange(1, r_max + 1)
    window = ranks[None, :] <= r[keep][:, None]
    rel *= window
    precision = np.cumsum(rel, axis=1) / ranks[None, :]
    ap = np.sum(rel * precision, axis=1) / r[keep]
    value = float(np.mean(ap))
    return (value, excluded) if return_excluded else value


@dataclass
class FallbackReport:
    """Prec@1 at each ancestor level, restricted to queries wrong at the leaf."""

    n_queries: int
    n_failures: int
    accuracy: dict[int, float] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.n_failures == 0

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "n_failures": self.n_failures,
            "empty": self.empty,
            "accuracy": {str(k): v for k, v in sorted(self.accuracy.items())},
        }


def fallback_accuracy(db: EmbeddingDatabase, queries: LabeledSet) -> FallbackReport:
    _check_queries(db, queries)
    depth = queries.labels[0].depth
    if depth < 2:
        raise ValueError("fallback accuracy needs labels with at least two levels")
    idx, _ = db.ranked(queries.vectors, 1)
    nearest = [db.labels[i] for i in idx[:, 0]]
    failed = [q for q, (lab, nn) in enumerate(zip(queries.labels, nearest)) if lab.leaf != nn.leaf]
    report = FallbackReport(n_queries=len(queries), n_failures=len(failed))
    if not failed:
        return report
    for level in range(1, depth):
        ok = sum(level_key(queries.labels[q], level) == level_key(nearest[q], level) for q in failed)
        report.accuracy[level] = ok / len(failed)
    return report


@dataclass
class RetrievalReport:
    precision_at_k: float
    map_at_r: float
    k: int
    n_queries: int
    n_database: int
    map_excluded: int = 0
    per_level_precision: dict[int, float] = field(default_factory=dict)
    fallback: FallbackReport | None = None

    def to_dict(self) -> dict:
        out = {
            "k": self.k,
            "n_queries": self.n_queries,
            "n_database": self.n_database,
            f"precision_at_{self.k}": self.precision_at_k,
            "map_at_r": self.map_at_r,
            "map_excluded": self.map_excluded,
            "per_level_precision": {str(k): v for k, v in sorted(self.per_level_precision.items())},
        }
        if self.fallback is not None:
            out["fallback"] = self.fallback.to_dict()
        return out


def evaluate(db: EmbeddingDatabase, queries: LabeledSet, k: int = 1, levels: Sequence[int] | None = None) -> RetrievalReport:
    """Prec@k and mAP@R at the leaf, Prec@k at ``levels`` and the fallback table."""
    prec = precision_at_k(db, queries, k)
    mapr, excluded = map_at_r(db, queries, return_excluded=True)
    per_level = {lvl: precision_at_k(db, queries, k, lvl) for lvl in (levels or [])}
    fb = fallback_accuracy(db, queries) if queries.labels[0].depth >= 2 else None
    return RetrievalReport(
        precision_at_k=prec,
        map_at_r=mapr,
        k=k,
        n_queries=len(queries),
        n_database=len(db),
        map_excluded=excluded,
        per_level_precision=per_level,
        fallback=fb,
    )
