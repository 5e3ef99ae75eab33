"""Alternative structural encodings and the preprocessing-cost benchmark.

DTW neighbor matrices, random-walk structural encodings (RWSE) and Laplacian
eigenvector encodings (LapPE) are the alternatives the clique adjacency is
compared against, both for accuracy (see :mod:`cy2mixer.training`) and for
preprocessing time (:func:`benchmark_preprocessing`).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Literal

import numba as nb
import numpy as np
import scipy.linalg

from .data import SignalTensor, split_bounds
from .errors import EmptySequence, FeatureOutOfRange, InsufficientSpectrum, KTooLarge, TopKTooLarge
from .topology import AdjacencyMatrix, Graph, clique_adjacency, cycle_basis_paton, dense_adjacency

nb.config.THREADING_LAYER = "omp"

ZERO_EIG_TOL = 1e-9


@nb.njit(cache=True, nogil=True)
def _dtw_kernel(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.empty(m)
    cur = np.empty(m)
    prev[0] = abs(a[0] - b[0])
    for j in range(1, m):
        prev[j] = prev[j - 1] + abs(a[0] - b[j])
    for i in range(1, n):
        cur[0] = prev[0] + abs(a[i] - b[0])
        for j in range(1, m):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = best + abs(a[i] - b[j])
        prev, cur = cur, prev
    return prev[m - 1]


@nb.njit(cache=True, parallel=True)
def _dtw_pairs(series, rows, cols):
    out = np.empty(rows.shape[0])
    for p in nb.prange(rows.shape[0]):
        out[p] = _dtw_kernel(series[rows[p]], series[cols[p]])
    return out


def dtw_distance(a, b) -> float:
    """Cumulative DTW cost with |x - y| local cost and steps (1,0), (0,1), (1,1)."""
    a = np.ascontiguousarray(a, dtype=np.float64).ravel()
    b = np.ascontiguousarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySequence("DTW needs two non-empty sequences")
    return float(_dtw_kernel(a, b))


def pairwise_dtw(series: np.ndarray) -> np.ndarray:
    """Symmetric N x N DTW distance table for N series (rows of ``series``)."""
    series = np.ascontiguousarray(series, dtype=np.float64)
    n = series.shape[0]
    rows, cols = np.triu_indices(n, k=1)
    d = np.zeros((n, n))
    if rows.size:
        vals = _dtw_pairs(series, rows.astype(np.int64), cols.astype(np.int64))
        d[rows, cols] = vals
        d[cols, rows] = vals
    return d


def default_top_k(g: Graph) -> int:
    """Average degree rounded up, at least 1."""
    return max(1, math.ceil(2 * g.num_edges / g.num_nodes))


def top_k_neighbors(dist: np.ndarray, top_k: int) -> AdjacencyMatrix:
    """Mark each node's ``top_k`` closest other nodes, then symmetrize by union.

    Equal distances resolve to the lower node index.
    """
    n = dist.shape[0]
    if not 0 < top_k < n:
        raise TopKTooLarge(f"top_k must be in [1, {n - 1}], got {top_k}")
    a = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        order = np.lexsort((others, dist[i, others]))
        a[i, others[order[:top_k]]] = 1.0
    a = np.maximum(a, a.T)
    return AdjacencyMatrix(a, "dtw")


def dtw_series(signals: SignalTensor, feature: int = 0, stride: int = 1, split_ratios=(0.6, 0.2, 0.2)) -> np.ndarray:
    """Training-split history per node (N x L), optionally downsampled."""
    c = signals.shape[2]
    if not 0 <= feature < c:
        raise FeatureOutOfRange(f"feature {feature} outside [0, {c})")
    lo, hi = split_bounds(signals.shape[0], split_ratios)[0]
    return np.ascontiguousarray(signals.data[lo:hi:stride, :, feature].T)


def dtw_matrix(
    signals: SignalTensor,
    feature: int = 0,
    top_k: int = 1,
    stride: int = 1,
    split_ratios=(0.6, 0.2, 0.2),
) -> AdjacencyMatrix:
    """Semantic-neighbor matrix from pairwise DTW of training histories."""
    n = signals.shape[1]
    if not 0 < top_k < n:
        raise TopKTooLarge(f"top_k must be in [1, {n - 1}], got {top_k}")
    series = dtw_series(signals, feature, stride, split_ratios)
    if series.shape[1] == 0:
        raise EmptySequence("training split is empty")
    return top_k_neighbors(pairwise_dtw(series), top_k)


def rwse(g: Graph, K: int) -> np.ndarray:
    """Return probabilities ``diag(P^k)`` for ``k = 1..K`` with ``P = D^-1 A``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    a = dense_adjacency(g, "binary").data
    deg = a.sum(axis=1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    p = a * inv[:, None]
    out = np.zeros((g.num_nodes, K))
    pk = np.eye(g.num_nodes)
    for k in range(K):
        pk = pk @ p
        out[:, k] = np.diag(pk)
    return out


def normalized_laplacian(g: Graph) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated nodes get an all-zero row and column."""
    a = dense_adjacency(g, "binary").data
    deg = a.sum(axis=1)
    inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    return np.diag((deg > 0).astype(float)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def laplacian_spectrum(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    # driver "ev": Householder tridiagonalization followed by implicit QL/QR
    return scipy.linalg.eigh(normalized_laplacian(g), driver="ev")


def lap_pe(g: Graph, k: int) -> np.ndarray:
    """Eigenvectors of the ``k`` smallest nonzero normalized-Laplacian eigenvalues.

    Columns have unit norm and are sign-fixed so the largest-magnitude entry is
    positive.
    """
    n = g.num_nodes
    if not 0 < k < n:
        raise KTooLarge(f"k must be in [1, {n - 1}], got {k}")
    vals, vecs = laplacian_spectrum(g)
    keep = np.flatnonzero(vals > ZERO_EIG_TOL)
    if keep.size < k:
        raise InsufficientSpectrum(f"only {keep.size} nonzero eigenvalues, need {k}")
    pe = vecs[:, keep[:k]].copy()
    pe /= np.linalg.norm(pe, axis=0, keepdims=True)
    pivot = pe[np.argmax(np.abs(pe), axis=0), np.arange(k)]
    pe *= np.where(pivot < 0, -1.0, 1.0)
    return pe


@dataclass
class EncodingResult:
    method: Literal["clique", "dtw", "rwse", "lappe"]
    payload: np.ndarray
    elapsed: float

    @property
    def shape(self) -> tuple[int, ...]:
        return self.payload.shape


@dataclass
class BenchConfig:
    dtw: bool = True
    dtw_stride: int = 1
    dtw_top_k: int | None = None
    feature: int = 0
    rwse_k: int = 16
    lappe_k: int = 8
    split_ratios: tuple = (0.6, 0.2, 0.2)


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def warm_up() -> None:
    """Trigger JIT compilation so it is not counted in DTW timings."""
    pairwise_dtw(np.zeros((2, 2)))


def benchmark_preprocessing(g: Graph, signals: SignalTensor | None, config: BenchConfig | None = None) -> list[EncodingResult]:
    """Time the construction of each structural matrix under the same conditions."""
    config = config or BenchConfig()
    results = []

    clique, dt = _timed(lambda: clique_adjacency(g, cycle_basis_paton(g)))
    results.append(EncodingResult("clique", clique.data, dt))

    if config.dtw and signals is not None and signals.shape[0] > 0:
        warm_up()
        top_k = config.dtw_top_k or default_top_k(g)
        top_k = min(top_k, g.num_nodes - 1)
        mat, dt = _timed(
            lambda: dtw_matrix(signals, config.feature, top_k, config.dtw_stride, config.split_ratios)
        )
        results.append(EncodingResult("dtw", mat.data, dt))

    enc, dt = _timed(lambda: rwse(g, config.rwse_k))
    results.append(EncodingResult("rwse", enc, dt))

    k = min(config.lappe_k, g.num_nodes - 1)
    enc, dt = _timed(lambda: lap_pe(g, k))
    results.append(EncodingResult("lappe", enc, dt))
    return results
