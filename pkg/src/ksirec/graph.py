"""k-NN modality item graphs: cosine similarity, top-k sparsification, symmetric normalization."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import FeatureMatrix
from .errors import ConfigError
from .tensorio import atomic_write_bytes, decode_graph, encode_graph


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """CSR adjacency over items with rows in canonical (ascending column) order."""

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    weights: np.ndarray
    modality: str = ""

    def __post_init__(self) -> None:
        ro = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if len(ro) != self.n + 1 or ro[0] != 0 or ro[-1] != len(ci) or len(ci) != len(w):
            raise ValueError("inconsistent CSR arrays")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n):
            raise ValueError("column index out of bounds")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("graph weights must be finite and non-negative")
        for arr in (ro, ci, w):
            arr.setflags(write=False)
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "weights", w)

    @property
    def nnz(self) -> int:
        return len(self.col_indices)

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    @cached_property
    def csr(self) -> sp.csr_matrix:
        m = sp.csr_matrix((self.weights, self.col_indices, self.row_offsets), shape=(self.n, self.n))
        m.has_sorted_indices = True
        return m

    @cached_property
    def csr_t(self) -> sp.csr_matrix:
        m = self.csr.T.tocsr()
        m.sort_indices()
        return m

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    @classmethod
    def from_rows(cls, n: int, cols: list[np.ndarray], vals: list[np.ndarray], modality: str = "") -> "SparseGraph":
        offsets = np.zeros(n + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(c) for c in cols])
        ci = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        w = np.concatenate(vals) if vals else np.zeros(0)
        return cls(n, offsets, ci, w, modality)

    def save(self, path: str | Path) -> None:
        atomic_write_bytes(path, encode_graph(self.n, self.row_offsets, self.col_indices, self.weights))

    @classmethod
    def load(cls, path: str | Path, modality: str = "") -> "SparseGraph":
        n, ro, ci, w = decode_graph(Path(path).read_bytes(), source=str(path))
        return cls(n, ro, ci, w, modality)


def _unit_rows(values: np.ndarray) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None] * (norms > 0)[:, None]


def cosine_similarity_row(features: FeatureMatrix | np.ndarray, i: int) -> np.ndarray:
    """Cosine similarity of item ``i`` against every item, in float64.

    Zero-norm rows (on either side) give similarity 0.
    """
    values = features.values if isinstance(features, FeatureMatrix) else features
    unit = _unit_rows(values)
    return unit @ unit[i]


def _select_row(scores: np.ndarray, self_index: int | None, k: int) -> np.ndarray:
    """Columns of the top-k strictly positive scores; self first, then value desc, index asc."""
    positive = np.flatnonzero(scores > 0)
    head = np.zeros(0, dtype=np.int64)
    budget = k
    if self_index is not None and scores[self_index] > 0:
        positive = positive[positive != self_index]
        head = np.array([self_index], dtype=np.int64)
        budget = k - 1
    if budget <= 0:
        return head
    if len(positive) > budget:
        vals = scores[positive]
        cutoff = np.partition(vals, len(vals) - budget)[len(vals) - budget]
        positive = positive[vals >= cutoff]
        if len(positive) > budget:
            # stable sort on -value keeps ascending index among ties
            order = np.argsort(-scores[positive], kind="stable")[:budget]
            positive = positive[order]
    return np.sort(np.concatenate([head, positive]))


def _topk_rows(
    sims: np.ndarray, k: int, exclude_self_loop: bool, row_offset: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    cols, vals = [], []
    for r in range(sims.shape[0]):
        diag = row_offset + r
        scores = sims[r]
        if exclude_self_loop:
            scores = scores.copy()
            scores[diag] = 0.0
        keep = _select_row(scores, None if exclude_self_loop else diag, k)
        cols.append(keep)
        vals.append(scores[keep])
    return cols, vals


def topk_sparsify(
    similarities: np.ndarray,
    k: int,
    exclude_self_loop: bool = False,
    modality: str = "",
) -> SparseGraph:
    """Keep the k largest positive entries of each row of a square similarity matrix.

    Negative entries are zeroed and zero entries are never stored. The diagonal
    is ranked ahead of equal-valued neighbours, so self-loops always survive;
    ``exclude_self_loop`` drops them instead. Remaining ties go to the smaller
    item index.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ValueError(f"expected a square similarity matrix, got shape {sims.shape}")
    cols, vals = _topk_rows(sims, k, exclude_self_loop, 0)
    return SparseGraph.from_rows(sims.shape[0], cols, vals, modality)


def normalize(adj: SparseGraph) -> SparseGraph:
    """Symmetric normalization D^-1/2 A D^-1/2 with D the row sums; zero-degree rows map to 0."""
    rows = np.repeat(np.arange(adj.n), adj.row_nnz())
    deg = np.bincount(rows, weights=adj.weights, minlength=adj.n)
    inv_sqrt = np.zeros(adj.n)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    weights = inv_sqrt[rows] * adj.weights * inv_sqrt[adj.col_indices]
    return SparseGraph(adj.n, adj.row_offsets, adj.col_indices, weights, adj.modality)


def spmm(graph: SparseGraph, H: np.ndarray, transpose: bool = False) -> np.ndarray:
    """``graph @ H`` (or ``graph.T @ H``), summing each row in ascending column order."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != graph.n:
        raise ValueError(f"dimension mismatch: graph has {graph.n} nodes, H has shape {H.shape}")
    m = graph.csr_t if transpose else graph.csr
    return np.asarray(m @ H)


def build_modality_graph(
    features: FeatureMatrix | np.ndarray,
    k: int,
    exclude_self_loop: bool = False,
    block_size: int = 1024,
    threads: int = 1,
    modality: str | None = None,
) -> SparseGraph:
    """Cosine -> clip negatives -> top-k -> normalize, ``block_size`` rows at a time.

    Blocks are independent, so ``threads > 1`` gives the same graph as a
    single worker.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if block_size < 1:
        raise ConfigError(f"block_size must be >= 1, got {block_size}")
    if isinstance(features, FeatureMatrix):
        values, tag = features.values, features.modality
    else:
        values, tag = np.asarray(features), ""
    tag = modality if modality is not None else tag
    unit = _unit_rows(values)
    n = unit.shape[0]
    has_norm = np.linalg.norm(unit, axis=1) > 0

    def block(start: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        stop = min(start + block_size, n)
        sims = unit[start:stop] @ unit.T
        idx = np.arange(start, stop)
        # self-similarity is exactly 1 for non-degenerate rows, not 1 +/- rounding
        sims[idx - start, idx] = np.where(has_norm[idx], 1.0, 0.0)
        return _topk_rows(sims, k, exclude_self_loop, start)

    starts = list(range(0, n, block_size))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(block, starts))
    else:
        parts = [block(s) for s in starts]
    cols = [c for p in parts for c in p[0]]
    vals = [v for p in parts for v in p[1]]
    return normalize(SparseGraph.from_rows(n, cols, vals, tag))
