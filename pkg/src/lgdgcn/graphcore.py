"""Sparse graphs, GCN normalisation and kNN / CkNN construction from point sets."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .autodiff import EdgeIndex, ShapeError, Value, sparse_matmul


class ParameterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CsrGraph:
    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray | None = None

    def __post_init__(self):
        if len(self.row_offsets) != self.n + 1:
            raise ShapeError(f"row_offsets has length {len(self.row_offsets)}, expected {self.n + 1}")
        for name in ("row_offsets", "col_indices", "values"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @classmethod
    def from_edges(cls, n: int, src, dst, symmetric: bool = True) -> "CsrGraph":
        """Unweighted graph from an edge list; self-loops and duplicates are dropped."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if symmetric:
            src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
        keep = src != dst
        m = sp.csr_matrix((np.ones(int(keep.sum())), (src[keep], dst[keep])), shape=(n, n))
        m.sum_duplicates()
        m.data[:] = 1.0
        return cls.from_scipy(m, weighted=False)

    @classmethod
    def from_dense(cls, a: np.ndarray, weighted: bool = False) -> "CsrGraph":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=np.float64)), weighted=weighted)

    @classmethod
    def from_scipy(cls, m: sp.spmatrix, weighted: bool = True) -> "CsrGraph":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        return cls(
            n=m.shape[0],
            row_offsets=m.indptr.astype(np.int64),
            col_indices=m.indices.astype(np.int64),
            values=m.data.copy() if weighted else None,
        )

    @property
    def nnz(self) -> int:
        return len(self.col_indices)

    @property
    def weights(self) -> np.ndarray:
        return np.ones(self.nnz) if self.values is None else self.values

    @cached_property
    def scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, self.col_indices, self.row_offsets),
                             shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.scipy.toarray()

    @cached_property
    def edge_index(self) -> EdgeIndex:
        """Routing view: centre = row, neighbour = column of each stored entry."""
        rows, cols = self.edges
        return EdgeIndex(self.n, src=cols, dst=rows)

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) of every stored entry in CSR order."""
        rows = np.repeat(np.arange(self.n), np.diff(self.row_offsets))
        return rows, self.col_indices

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def average_degree(self) -> float:
        return self.nnz / self.n if self.n else 0.0

    def is_symmetric(self) -> bool:
        diff = self.scipy - self.scipy.T
        return diff.nnz == 0 or np.abs(diff.data).max() == 0

    def has_self_loops(self) -> bool:
        rows, cols = self.edges
        return bool(np.any(rows == cols))

    def edge_set(self) -> set[tuple[int, int]]:
        rows, cols = self.edges
        return {(int(i), int(j)) for i, j in zip(rows, cols) if i < j}

    def to_edge_list(self) -> str:
        """Debug dump: one ``i<TAB>j<TAB>w`` line per stored entry, sorted by (i, j)."""
        rows, cols = self.edges
        return "".join(f"{i}\t{j}\t{float(w)!r}\n" for i, j, w in zip(rows, cols, self.weights))


@dataclass(frozen=True)
class PointSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ShapeError(f"points must be N x d, got {pts.shape}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def _as_points(p) -> np.ndarray:
    return p.points if isinstance(p, PointSet) else PointSet(p).points


def pairwise_distances(p) -> np.ndarray:
    return _kernels.pair_distances(np.ascontiguousarray(_as_points(p), dtype=np.float64))


def kth_neighbor_distance(d: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point.

    Only the distance value enters the construction rules, so how tied
    neighbours are ordered never changes the resulting graph.
    """
    # the zero self-distance sorts first in every row, so position k is the k-th other point
    return np.partition(d, k, axis=1)[:, k]


def _check_k(n: int, k: int) -> None:
    if not (1 <= k <= n - 1):
        raise ParameterError(f"k must satisfy 1 <= k <= N-1 = {n - 1}, got {k}")


def _radius_graph(p, k: int, continuous: bool) -> CsrGraph:
    d = pairwise_distances(p)
    _check_k(d.shape[0], k)
    radius = kth_neighbor_distance(d, k)
    offsets, cols = _kernels.radius_adjacency(d, radius, continuous)
    return CsrGraph(d.shape[0], offsets, cols)


def knn_build(p, k: int) -> CsrGraph:
    """Union kNN graph: i ~ j when j is within i's k-th radius or i within j's."""
    return _radius_graph(p, k, continuous=False)


def cknn_build(p, k: int) -> CsrGraph:
    """Continuous kNN: i ~ j when d(i, j) < sqrt(r_i r_j), r the k-th neighbour distance."""
    return _radius_graph(p, k, continuous=True)


def build_graph(p, k: int, rule: str) -> CsrGraph:
    rule = rule.lower()
    if rule == "knn":
        return knn_build(p, k)
    if rule == "cknn":
        return cknn_build(p, k)
    raise ParameterError(f"unknown construction rule {rule!r}")


def sym_normalize(g: CsrGraph) -> CsrGraph:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = g.scipy.copy()
    a.data[:] = 1.0
    a = (a + sp.identity(g.n, format="csr")).tocsr()
    deg = np.asarray(a.sum(axis=1)).ravel()
    a.sort_indices()
    rows = np.repeat(np.arange(g.n), np.diff(a.indptr))
    # one rounding per entry, and exactly symmetric since the product commutes
    a.data = 1.0 / np.sqrt(deg[rows] * deg[a.indices])
    return CsrGraph.from_scipy(a, weighted=True)


def spmm(g: CsrGraph, x: Value) -> Value:
    if g.n != x.shape[0]:
        raise ShapeError(f"graph has {g.n} nodes but features have {x.shape[0]} rows")
    return sparse_matmul(g.scipy, x)
