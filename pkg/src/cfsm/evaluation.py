"""Classification/retrieval metrics and CFS activation diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError, DimensionError


@dataclass(frozen=True)
class RetrievalResult:
    rank1: float
    mAP: float
    average_precisions: np.ndarray

    def to_dict(self) -> dict:
        return {"rank1": self.rank1, "mAP": self.mAP}


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    mid_mass: float

    def rows(self):
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            yield float(lo), float(hi), int(c)


def classification_accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or len(logits) != len(labels):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def average_precision(relevant_in_rank_order: np.ndarray) -> float:
    """Mean of precision@rank taken at each relevant hit."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    hits = np.flatnonzero(rel)
    if len(hits) == 0:
        return 0.0
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def retrieval_metrics(query_F: np.ndarray, query_ids, gallery_F: np.ndarray, gallery_ids,
                      exclude_self: bool = False) -> RetrievalResult:
    """Rank the gallery by Euclidean distance to each query.

    ``exclude_self`` treats query ``i`` and gallery item ``i`` as the same
    sample (query set == gallery pool) and removes that pair from the ranking.
    Ties in distance are broken by gallery order.
    """
    query_F = np.asarray(query_F, dtype=np.float64)
    gallery_F = np.asarray(gallery_F, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if query_F.shape[1] != gallery_F.shape[1]:
        raise DimensionError(f"query dim {query_F.shape[1]} vs gallery dim {gallery_F.shape[1]}")
    if exclude_self and len(query_F) != len(gallery_F):
        raise ContractError("exclude_self needs query and gallery to be the same pool")
    aps = np.empty(len(query_F))
    top1 = np.empty(len(query_F), dtype=bool)
    for i, qid in enumerate(query_ids):
        keep = np.ones(len(gallery_ids), dtype=bool)
        if exclude_self:
            keep[i] = False
        rel_all = gallery_ids == qid
        if not np.any(rel_all & keep):
            raise DataError(f"query id {qid!r} has no match in the gallery")
        cand = np.flatnonzero(keep)
        diff = gallery_F[cand] - query_F[i]
        order = cand[np.argsort(np.einsum("ij,ij->i", diff, diff), kind="stable")]
        rel = rel_all[order]
        top1[i] = rel[0]
        aps[i] = average_precision(rel)
    return RetrievalResult(float(np.mean(top1)), float(np.mean(aps)), aps)


def activation_histogram(F_C: np.ndarray, bins: int = 10) -> Histogram:
    """Uniform bins over [0, 1] plus the fraction of entries inside (0.1, 0.9)."""
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    v = np.asarray(F_C, dtype=np.float64).ravel()
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise ContractError("activations must lie in [0, 1]")
    counts, edges = np.histogram(v, bins=bins, range=(0.0, 1.0))
    mid = float(np.mean((v > 0.1) & (v < 0.9))) if len(v) else 0.0
    return Histogram(edges, counts, mid)


def mid_mass(F_C: np.ndarray) -> float:
    v = np.asarray(F_C).ravel()
    return float(np.mean((v > 0.1) & (v < 0.9)))


def top_k_by_factor(F_C: np.ndarray, k: int, domains=None) -> list[list[tuple[int, str | None, float]]]:
    """Per factor, the ``k`` highest-activation rows as ``(index, domain, activation)``.

    Descending activation, ties broken by lowest index.
    """
    F_C = np.asarray(F_C, dtype=np.float64)
    n = F_C.shape[0]
    if not 0 <= k <= n:
        raise ContractError(f"k={k} must lie in [0, {n}]")
    out = []
    for j in range(F_C.shape[1]):
        col = F_C[:, j]
        order = np.lexsort((np.arange(n), -col))[:k]
        out.append([(int(i), None if domains is None else domains[i], float(col[i])) for i in order])
    return out
