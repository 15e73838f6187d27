"""Per-minibatch similarity graphs and the Laplacian feature regulariser.

The graph is built on one representation (CFS activations by default) and
used as a constant to smooth another (the extracted features), so only the
smoothed side receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .errors import ContractError, DataError, DimensionError


@dataclass(frozen=True)
class GraphSpec:
    """Symmetric kNN graph with a Gaussian kernel.

    ``sigma=None`` selects the median pairwise distance of the batch.
    """

    k: int = 8
    sigma: float | None = None
    normalized: bool = False
    normalize_by_n: bool = False
    symmetrize: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ContractError(f"GraphSpec.k must be >= 1, got {self.k}")
        if self.sigma is not None and not self.sigma > 0:
            raise ContractError(f"GraphSpec.sigma must be > 0, got {self.sigma}")
        if not self.symmetrize:
            raise ContractError("GraphSpec.symmetrize is always true")

    def for_batch(self, n: int) -> "GraphSpec":
        """Copy with ``k`` clamped to ``n - 1``."""
        if n < 2:
            raise DataError(f"a graph needs at least 2 rows, got {n}")
        if self.k < n:
            return self
        return replace(self, k=n - 1)


@dataclass(frozen=True)
class Laplacian:
    L: np.ndarray
    W: np.ndarray
    normalized: bool = False

    @property
    def n(self) -> int:
        return self.L.shape[0]


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def median_bandwidth(D: np.ndarray) -> float:
    """Median of the strictly upper-triangular distances; 1.0 if that is 0."""
    iu = np.triu_indices(D.shape[0], k=1)
    med = float(np.median(D[iu]))
    return med if med > 0 else 1.0


def build_similarity_graph(F_C: np.ndarray, spec: GraphSpec) -> np.ndarray:
    """Weight matrix ``W_ij = exp(-|f_i - f_j|^2 / (2 sigma^2))`` on the symmetric kNN pattern."""
    F_C = np.asarray(F_C, dtype=np.float64)
    n = F_C.shape[0]
    if n < 2:
        raise DataError(f"a graph needs at least 2 rows, got {n}")
    if spec.k >= n:
        raise ContractError(f"k={spec.k} must be smaller than the batch size {n}")
    D = pairwise_distances(F_C)
    sigma = spec.sigma if spec.sigma is not None else median_bandwidth(D)
    ranked = np.where(np.eye(n, dtype=bool), np.inf, D)
    nbrs = np.argsort(ranked, axis=1, kind="stable")[:, : spec.k]
    adj = np.zeros((n, n), dtype=bool)
    adj[np.repeat(np.arange(n), spec.k), nbrs.ravel()] = True
    adj |= adj.T
    W = np.where(adj, np.exp(-(D * D) / (2.0 * sigma * sigma)), 0.0)
    np.fill_diagonal(W, 0.0)
    return W


def laplacian(W: np.ndarray, normalized: bool = False) -> Laplacian:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionError(f"W must be square, got {W.shape}")
    if np.any(W < 0):
        raise ContractError("W must be nonnegative")
    if not np.allclose(W, W.T, rtol=0.0, atol=1e-12):
        raise ContractError("W must be symmetric")
    deg = W.sum(axis=1)
    if not normalized:
        return Laplacian(np.diag(deg) - W, W, False)
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    L = np.eye(len(deg)) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    return Laplacian(L, W, True)


def batch_laplacian(F_C: np.ndarray, spec: GraphSpec) -> Laplacian:
    spec = spec.for_batch(len(F_C))
    return laplacian(build_similarity_graph(F_C, spec), spec.normalized)


def graph_loss(F: nx.Node, lap: Laplacian, normalize_by_n: bool = False) -> nx.Node:
    """``Tr(F^T L F)`` with ``L`` held constant; optionally divided by ``N``."""
    n = lap.n
    if F.shape[0] != n:
        raise DimensionError(f"graph_loss: F has {F.shape[0]} rows, Laplacian is {lap.L.shape}")
    out = nx.sum_(nx.mul(F, nx.matmul(F.tape.const(lap.L), F)))
    return nx.scale(out, 1.0 / n) if normalize_by_n else out
