"""Distance-based out-of-distribution detection.

KNN+ scores a sample by the Euclidean distance from its normalised embedding
to the k-th nearest in-distribution record; the threshold is the smallest ID
score quantile that still recalls the target fraction of held-in samples.
A class-conditional Mahalanobis model with shared covariance is the
parametric baseline.  For every score here, larger means more OOD.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .retrieval import EmbeddingDatabase


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


def _as_scores(scores, name: str) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    return arr


def knn_scores(db: EmbeddingDatabase, queries: np.ndarray, k: int = 1) -> np.ndarray:
    """Distance to the k-th nearest database record for every query row."""
    if len(db) < k:
        raise ValueError(f"database of {len(db)} is smaller than k={k}")
    _, dist = db.ranked(np.atleast_2d(queries), k)
    return dist[:, k - 1]


def threshold_at_tpr(id_scores, target_tpr: float = 0.95) -> float:
    """The ceil(target_tpr * N)-th smallest ID score.

    Declaring ``score <= threshold`` in-distribution then recalls the least
    achievable fraction of ID samples that is at least ``target_tpr``.
    """
    if not 0 < target_tpr <= 1:
        raise ValueError("target_tpr must lie in (0, 1]")
    s = np.sort(_as_scores(id_scores, "calibration scores"))
    # guard against 0.95 * N landing a hair above an integer
    rank = max(1, math.ceil(target_tpr * len(s) - 1e-9))
    return float(s[rank - 1])


@dataclass(frozen=True, eq=False)
class KnnOodDetector:
    db: EmbeddingDatabase
    k: int = 1
    threshold: float = math.inf

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")

    def score(self, query: np.ndarray) -> float:
        return float(knn_scores(self.db, np.asarray(query)[None, :], self.k)[0])

    def scores(self, queries: np.ndarray) -> np.ndarray:
        return knn_scores(self.db, queries, self.k)

    def is_ood(self, queries: np.ndarray) -> np.ndarray:
        return self.scores(queries) > self.threshold


def knn_ood_score(detector: KnnOodDetector, query: np.ndarray) -> float:
    return detector.score(query)


def calibrate_threshold(db: EmbeddingDatabase, held_in: np.ndarray, k: int = 1, target_tpr: float = 0.95) -> float:
    held_in = np.atleast_2d(np.asarray(held_in, dtype=np.float64))
    if held_in.shape[0] == 0 or held_in.size == 0:
        raise ValueError("empty calibration set")
    return threshold_at_tpr(knn_scores(db, held_in, k), target_tpr)


def fit_knn_detector(db: EmbeddingDatabase, held_in: np.ndarray, k: int = 1, target_tpr: float = 0.95) -> KnnOodDetector:
    return KnnOodDetector(db=db, k=k, threshold=calibrate_threshold(db, held_in, k, target_tpr))


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """Fraction of OOD scores accepted as ID at the ``tpr`` ID-recall threshold."""
    thr = threshold_at_tpr(id_scores, tpr)
    ood = _as_scores(ood_scores, "ood_scores")
    return float(np.mean(ood <= thr))


def auroc(id_scores, ood_scores) -> float:
    """P(random OOD score > random ID score), ties counting one half."""
    ids = np.sort(_as_scores(id_scores, "id_scores"))
    ood = _as_scores(ood_scores, "ood_scores")
    below = np.searchsorted(ids, ood, side="left")
    not_above = np.searchsorted(ids, ood, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (len(ids) * len(ood)))


@dataclass(frozen=True, eq=False)
class MahalanobisModel:
    classes: tuple[str, ...]
    means: np.ndarray
    covariance: np.ndarray
    ridge: float

    def __post_init__(self):
        object.__setattr__(self, "_chol", cho_factor(self.covariance, lower=True))

    def scores(self, queries: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        best = np.full(q.shape[0], np.inf)
        for mu in self.means:
            diff = q - mu
            d2 = np.sum(diff * cho_solve(self._chol, diff.T).T, axis=1)
            best = np.minimum(best, d2)
        return best


def mahalanobis_fit(embeddings: np.ndarray, labels: Sequence[str], ridge: float | None = None) -> MahalanobisModel:
    """Per-class means and pooled within-class covariance plus ``ridge * I``.

    ``ridge=None`` uses ``1e-6 * trace(pooled) / D``.
    """
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = [str(lab) for lab in labels]
    n, d = x.shape
    if n < 2 or len(labels) != n:
        raise ValueError("need at least two labelled samples")
    if ridge is not None and ridge < 0:
        raise ValueError("ridge must be non-negative")
    classes = tuple(sorted(set(labels)))
    lab_arr = np.array(labels, dtype=object)
    means = np.empty((len(classes), d))
    centered = np.empty_like(x)
    for c, name in enumerate(classes):
        rows = lab_arr == name
        means[c] = x[rows].mean(axis=0)
        centered[rows] = x[rows] - means[c]
    pooled = centered.T @ centered / n
    if ridge is None:
        ridge = 1e-6 * float(np.trace(pooled)) / d
    cov = pooled + ridge * np.eye(d)
    if np.linalg.matrix_rank(cov) < d:
        raise SingularCovarianceError("pooled covariance is singular; use a positive ridge")
    try:
        return MahalanobisModel(classes=classes, means=means, covariance=cov, ridge=float(ridge))
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(str(exc)) from exc


def mahalanobis_score(model: MahalanobisModel, query: np.ndarray) -> float:
    return float(model.scores(np.asarray(query)[None, :])[0])


def write_score_dump(path: str | Path, ids: Sequence[str], scores: Sequence[float], is_id: Sequence[bool]) -> None:
    """CSV of ``id,score,is_id`` rows for external ROC tooling."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "score", "is_id"])
        for sid, score, flag in zip(ids, scores, is_id):
            w.writerow([sid, repr(float(score)), int(bool(flag))])
