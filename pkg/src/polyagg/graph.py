"""Undirected graphs and partition-quality functionals.

Partitions are plain integer label arrays (one class id per node); soft
partitions are ``(N, M)`` row-stochastic probability matrices.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc

from polyagg.errors import GraphError


class Graph:
    """Undirected, unweighted, self-loop-free graph in CSR form.

    Neighbor lists are stored symmetrically and sorted. Build instances with
    :meth:`from_edges` or :meth:`from_adjacency`.
    """

    def __init__(self, n: int, indptr, indices):
        self.n = int(n)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)
        self.degrees = np.diff(self.indptr)
        self.degrees.setflags(write=False)

    @classmethod
    def from_edges(cls, n: int, edges) -> Graph:
        """Graph on ``n`` nodes from an iterable of node pairs.

        Duplicate pairs collapse to one edge; self-loops are rejected.
        """
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise GraphError(f"edge endpoint out of range [0, {n})")
        if np.any(e[:, 0] == e[:, 1]):
            raise GraphError("self-loops are not allowed")
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
        return cls.from_adjacency(a)

    @classmethod
    def from_adjacency(cls, a) -> Graph:
        """Graph from a square (dense or sparse) 0/1 adjacency matrix."""
        a = sp.csr_matrix(a, copy=True)
        if a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got {a.shape}")
        a.data = np.ones_like(a.data, dtype=np.int8)
        a.eliminate_zeros()
        a.sum_duplicates()
        a.data[:] = 1
        if a.diagonal().any():
            raise GraphError("self-loops are not allowed")
        if (a != a.T).nnz:
            raise GraphError("adjacency is not symmetric")
        a.sort_indices()
        return cls(a.shape[0], a.indptr, a.indices)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Sparse float adjacency matrix A."""
        return sp.csr_matrix((np.ones(len(self.indices)), self.indices, self.indptr),
                             shape=(self.n, self.n))

    @cached_property
    def mean_operator(self) -> sp.csr_matrix:
        """Row-normalized adjacency D^-1 A; isolated nodes get a zero row."""
        inv = np.zeros(self.n)
        nz = self.degrees > 0
        inv[nz] = 1.0 / self.degrees[nz]
        return sp.csr_matrix(sp.diags(inv) @ self.adjacency)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def edges(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with ``i < j``."""
        rows = np.repeat(np.arange(self.n), self.degrees)
        keep = rows < self.indices
        return np.column_stack([rows[keep], self.indices[keep]])

    def __repr__(self):
        return f"Graph(n={self.n}, n_edges={self.n_edges})"


def _labels(g: Graph, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (g.n,):
        raise GraphError(f"expected {g.n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or not np.issubdtype(labels.dtype, np.integer)):
        raise GraphError("labels must be non-negative integers")
    return labels.astype(np.int64, copy=False)


def _part_cuts(g: Graph, labels: np.ndarray, m: int) -> np.ndarray:
    """cut(S_k, S_k^C) for every class k."""
    e = g.edges()
    cross = labels[e[:, 0]] != labels[e[:, 1]]
    return (np.bincount(labels[e[cross, 0]], minlength=m)
            + np.bincount(labels[e[cross, 1]], minlength=m)).astype(float)


def cut(g: Graph, labels) -> int:
    """Number of edges joining the two classes of a bisection."""
    labels = _labels(g, labels)
    if labels.size and labels.max() > 1:
        raise GraphError("cut() takes a two-class partition; use multiway_cut()")
    e = g.edges()
    return int(np.count_nonzero(labels[e[:, 0]] != labels[e[:, 1]]))


def multiway_cut(g: Graph, labels) -> float:
    """Half the sum over classes of cut(S_k, S_k^C)."""
    labels = _labels(g, labels)
    m = int(labels.max()) + 1 if labels.size else 0
    return 0.5 * float(_part_cuts(g, labels, m).sum())


def volume(g: Graph, nodes) -> int:
    """Sum of degrees over ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    return int(g.degrees[nodes].sum())


def normalized_cut(g: Graph, labels, n_parts: int | None = None) -> float:
    """Sum over classes of cut(S_k, S_k^C) / vol(S_k)."""
    labels = _labels(g, labels)
    m = n_parts if n_parts is not None else int(labels.max()) + 1
    vol = np.bincount(labels, weights=g.degrees, minlength=m)
    if np.any(vol <= 0):
        raise GraphError(f"class {int(np.argmin(vol))} has zero volume")
    return float((_part_cuts(g, labels, m) / vol).sum())


def check_prob_partition(y, n: int | None = None, tol: float = 1e-9) -> np.ndarray:
    """Validate a row-stochastic probability matrix and return it as float."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise GraphError(f"probability partition must be 2D, got shape {y.shape}")
    if n is not None and y.shape[0] != n:
        raise GraphError(f"probability partition has {y.shape[0]} rows, graph has {n} nodes")
    if not np.all(np.isfinite(y)) or y.min(initial=0.0) < 0 or y.max(initial=0.0) > 1:
        raise GraphError("probabilities must be finite and in [0, 1]")
    if np.any(np.abs(y.sum(axis=1) - 1.0) > tol):
        raise GraphError("probability rows must sum to 1")
    return y


def expected_cut(g: Graph, y, k: int) -> float:
    """Expected number of edges leaving class ``k`` under soft assignment Y.

    Sums ``Y[i,k] * (1 - Y[j,k])`` over ordered neighbor pairs. For a one-hot
    Y this is cut(S_k, S_k^C); summed over the two classes of a bisection it
    is twice the cut.
    """
    y = check_prob_partition(y, g.n)
    yk = y[:, k]
    return float(yk @ g.degrees - yk @ (g.adjacency @ yk))


def expected_normalized_cut(g: Graph, y) -> float:
    """Expected normalized cut ``sum_k E[cut_k] / Gamma_k`` with Gamma = Y^T D."""
    y = check_prob_partition(y, g.n)
    gamma = y.T @ g.degrees
    if np.any(gamma <= 0):
        raise GraphError(f"expected volume of class {int(np.argmin(gamma))} is zero")
    ay = g.adjacency @ y
    num = y.T @ g.degrees - np.einsum("ik,ik->k", y, ay)
    return float((num / gamma).sum())


def connected_components(g: Graph) -> np.ndarray:
    """Component label per node, numbered in order of first appearance."""
    if g.n == 0:
        return np.zeros(0, dtype=np.int64)
    _, lab = _cc(g.adjacency, directed=False)
    _, first = np.unique(lab, return_index=True)
    order = np.argsort(np.argsort(first))
    return order[lab].astype(np.int64)


def _class_components(g: Graph, labels: np.ndarray, cls: int) -> list[np.ndarray]:
    nodes = np.flatnonzero(labels == cls)
    if nodes.size == 0:
        return []
    sub, _ = induced_subgraph(g, nodes)
    comp = connected_components(sub)
    return [nodes[comp == c] for c in range(int(comp.max()) + 1)]


def is_valid_bisection(g: Graph, labels) -> tuple[bool, str]:
    """Check that both classes are nonempty and induce connected subgraphs."""
    labels = _labels(g, labels)
    if labels.size and labels.max() > 1:
        return False, "labels outside {0, 1}"
    for cls in (0, 1):
        comps = _class_components(g, labels, cls)
        if not comps:
            return False, f"class {cls} is empty"
        if len(comps) > 1:
            return False, f"class {cls} has {len(comps)} connected components"
    return True, "ok"


def fix_partition(g: Graph, labels) -> np.ndarray:
    """Repair a bisection so that both classes are connected.

    The largest component of each class keeps its label; every other
    component is moved, smallest first, to the class holding the majority of
    its outside neighbors (ties go to the opposite class). Each move merges
    the component into a neighbor, so the number of components strictly
    decreases and the loop terminates.
    """
    labels = _labels(g, labels).copy()
    if labels.size and labels.max() > 1:
        raise GraphError("fix_partition() takes a two-class partition")
    if g.n and connected_components(g).max() > 0:
        raise GraphError("graph is disconnected; split it into components first")
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise GraphError("both classes must be nonempty")
    for _ in range(g.n + 1):
        strays = []
        for cls in (0, 1):
            comps = _class_components(g, labels, cls)
            largest = max(range(len(comps)), key=lambda c: (len(comps[c]), -int(comps[c][0])))
            strays += [(len(c), int(c[0]), cls, c) for k, c in enumerate(comps) if k != largest]
        if not strays:
            return labels
        _, _, cls, comp = min(strays, key=lambda s: (s[0], s[1]))
        inside = np.zeros(g.n, dtype=bool)
        inside[comp] = True
        nbr = np.concatenate([g.neighbors(i) for i in comp])
        outside = labels[nbr[~inside[nbr]]]
        same, other = np.count_nonzero(outside == cls), np.count_nonzero(outside != cls)
        labels[comp] = cls if same > other else 1 - cls
    raise AssertionError("fix_partition did not converge")  # unreachable for connected graphs


def induced_subgraph(g: Graph, nodes) -> tuple[Graph, np.ndarray]:
    """Subgraph on ``nodes``.

    Returns ``(sub, ids)`` where ``ids`` is the sorted array of original node
    ids: new node ``i`` is original node ``ids[i]``.
    """
    ids = np.unique(np.asarray(nodes, dtype=np.int64))
    if ids.size == 0:
        raise GraphError("induced subgraph of an empty node set")
    a = g.adjacency[ids][:, ids].tocsr()
    a.sort_indices()
    return Graph(len(ids), a.indptr, a.indices), ids
