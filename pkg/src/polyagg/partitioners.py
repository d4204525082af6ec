"""Bisection models: map a graph plus node features to two-class probabilities.

Every backend exposes ``bisect(graph, features) -> Y`` with ``Y`` of shape
``(N, 2)``. Hard backends (k-means, multilevel) return one-hot rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import scipy.sparse as sp

from polyagg._rng import rng_for
from polyagg.errors import GraphError
from polyagg.gnn.model import GnnModel, forward
from polyagg.graph import Graph, connected_components, fix_partition, is_valid_bisection


class BisectionModel(Protocol):
    name: str

    def bisect(self, g: Graph, x: np.ndarray) -> np.ndarray: ...


def harden(y: np.ndarray) -> np.ndarray:
    """Per-row argmax of a two-class probability matrix; ties go to class 0."""
    y = np.asarray(y)
    return (y[:, 1] > y[:, 0]).astype(np.int64)


def one_hot(labels: np.ndarray) -> np.ndarray:
    y = np.zeros((len(labels), 2))
    y[np.arange(len(labels)), labels] = 1.0
    return y


# -- k-means ------------------------------------------------------------------
@dataclass
class KMeansConfig:
    k: int = 2
    max_iters: int = 100
    tol: float = 1e-9
    restarts: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.k != 2:
            raise ValueError("only two clusters are supported")
        if self.max_iters < 1 or self.tol < 0 or self.restarts < 1:
            raise ValueError("need max_iters >= 1, tol >= 0, restarts >= 1")


def _plusplus_seed(points, rng):
    first = points[rng.integers(len(points))]
    d2 = ((points - first) ** 2).sum(axis=1)
    second = points[rng.choice(len(points), p=d2 / d2.sum())]
    return np.stack([first, second])


def _lloyd(points, centers, max_iters, tol):
    labels = None
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        for c in range(2):
            if not np.any(new == c):
                # empty cluster: take the point farthest from its center
                far = np.argmax(d2[np.arange(len(points)), new])
                new[far] = c
        moved = np.stack([points[new == c].mean(axis=0) for c in range(2)])
        shift = np.abs(moved - centers).max()
        stable = labels is not None and np.array_equal(new, labels)
        labels, centers = new, moved
        if stable or shift <= tol:
            break
    sse = sum(((points[labels == c] - centers[c]) ** 2).sum() for c in range(2))
    return labels, float(sse)


def kmeans_bisect(points, cfg: KMeansConfig | None = None) -> np.ndarray:
    """Two-means labels of a point cloud (k-means++ seeding, best of restarts)."""
    cfg = cfg or KMeansConfig()
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        raise ValueError("k-means bisection needs at least two points")
    if np.all(points == points[0]):
        warnings.warn("all points coincide; returning an arbitrary balanced split",
                      RuntimeWarning, stacklevel=2)
        return (np.arange(n) >= n // 2).astype(np.int64)
    rng = rng_for(cfg.seed, "kmeans")
    best, best_sse = None, np.inf
    for _ in range(cfg.restarts):
        labels, sse = _lloyd(points, _plusplus_seed(points, rng), cfg.max_iters, cfg.tol)
        if sse < best_sse:
            best, best_sse = labels, sse
    return best.astype(np.int64)


class KMeansBisector:
    """k-means over element barycenters (feature columns 1 and 2)."""

    name = "kmeans"

    def __init__(self, cfg: KMeansConfig | None = None):
        self.cfg = cfg or KMeansConfig()

    def bisect(self, g: Graph, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[0] != g.n:
            raise ValueError(f"{x.shape[0]} feature rows for {g.n} nodes")
        return one_hot(kmeans_bisect(x[:, 1:3], self.cfg))


# -- multilevel baseline --------------------------------------------------------
@dataclass
class MultilevelConfig:
    coarsen_target: int = 24
    refine_sweeps: int = 4
    seed: int = 0
    initial_trials: int = 8
    balance: tuple[float, float] = (0.4, 0.6)

    def __post_init__(self):
        if self.coarsen_target < 2:
            raise ValueError("coarsen_target must be >= 2")


def _heavy_edge_matching(w: sp.csr_matrix, rng) -> np.ndarray:
    n = w.shape[0]
    match = np.full(n, -1)
    indptr, indices, data = w.indptr, w.indices, w.data
    for u in rng.permutation(n):
        if match[u] >= 0:
            continue
        best, best_w = -1, 0.0
        for p in range(indptr[u], indptr[u + 1]):
            v = indices[p]
            if match[v] < 0 and v != u and data[p] > best_w:
                best, best_w = v, data[p]
        if best >= 0:
            match[u], match[best] = best, u
        else:
            match[u] = u
    cmap = np.full(n, -1)
    nc = 0
    for u in range(n):
        if cmap[u] < 0:
            cmap[u] = cmap[match[u]] = nc
            nc += 1
    return cmap


def _cut_weight(w: sp.csr_matrix, labels) -> float:
    coo = w.tocoo()
    return 0.5 * float(coo.data[labels[coo.row] != labels[coo.col]].sum())


def _grow_region(w: sp.csr_matrix, vw: np.ndarray, start: int) -> np.ndarray:
    """Greedy graph growing from ``start`` until half the node weight is taken."""
    n = w.shape[0]
    inside = np.zeros(n, dtype=bool)
    inside[start] = True
    taken, half = vw[start], 0.5 * vw.sum()
    # gain[v] = weight into the region - weight out of it, for v outside
    deg = np.asarray(w.sum(axis=1)).ravel()
    to_region = np.asarray(w[start].todense()).ravel()
    while taken < half:
        frontier = np.flatnonzero(~inside & (to_region > 0))
        if frontier.size == 0:
            break
        gain = 2 * to_region[frontier] - deg[frontier]
        v = frontier[np.argmax(gain)]
        inside[v] = True
        taken += vw[v]
        row = w.getrow(v)
        to_region[row.indices] += row.data
    return inside.astype(np.int64)


def _refine(w: sp.csr_matrix, vw: np.ndarray, labels: np.ndarray, cfg: MultilevelConfig, rng):
    total = vw.sum()
    lo, hi = cfg.balance[0] * total, cfg.balance[1] * total
    side = np.array([vw[labels == 0].sum(), vw[labels == 1].sum()])
    count = np.bincount(labels, minlength=2)
    indptr, indices, data = w.indptr, w.indices, w.data
    for _ in range(cfg.refine_sweeps):
        moved = False
        for u in rng.permutation(len(labels)):
            s = labels[u]
            nb = indices[indptr[u]:indptr[u + 1]]
            wt = data[indptr[u]:indptr[u + 1]]
            ext = wt[labels[nb] != s].sum()
            if ext == 0:
                continue
            gain = ext - wt[labels[nb] == s].sum()
            if gain <= 0 or count[s] <= 1:
                continue
            new_src, new_dst = side[s] - vw[u], side[1 - s] + vw[u]
            in_band = lo <= new_src <= hi and lo <= new_dst <= hi
            better = abs(new_src - new_dst) < abs(side[s] - side[1 - s])
            if not (in_band or better):
                continue
            labels[u] = 1 - s
            side[s], side[1 - s] = new_src, new_dst
            count[s] -= 1
            count[1 - s] += 1
            moved = True
        if not moved:
            break
    return labels


def multilevel_bisect(g: Graph, cfg: MultilevelConfig | None = None) -> np.ndarray:
    """Coarsen by heavy-edge matching, grow an initial bisection, then project
    back with greedy boundary refinement. Output is a valid bisection."""
    cfg = cfg or MultilevelConfig()
    if g.n < 2:
        raise GraphError("multilevel bisection needs at least two nodes")
    if connected_components(g).max() > 0:
        raise GraphError("multilevel bisection needs a connected graph")
    rng = rng_for(cfg.seed, "multilevel")
    w = sp.csr_matrix(g.adjacency, dtype=np.float64)
    vw = np.ones(g.n)
    levels = []
    while w.shape[0] > cfg.coarsen_target:
        cmap = _heavy_edge_matching(w, rng)
        nc = int(cmap.max()) + 1
        if nc > 0.95 * w.shape[0]:
            break
        proj = sp.csr_matrix((np.ones(len(cmap)), (np.arange(len(cmap)), cmap)),
                             shape=(len(cmap), nc))
        levels.append((w, vw, cmap))
        wc = (proj.T @ w @ proj).tocsr()
        wc.setdiag(0)
        wc.eliminate_zeros()
        w, vw = wc, proj.T @ vw

    n = w.shape[0]
    starts = rng.permutation(n)[:min(n, cfg.initial_trials)]
    best, best_key = None, None
    total = vw.sum()
    for s in starts:
        lab = _grow_region(w, vw, int(s))
        frac = vw[lab == 1].sum() / total
        key = (_cut_weight(w, lab) + (0 if 0.3 <= frac <= 0.7 else np.inf), abs(frac - 0.5))
        if best_key is None or key < best_key:
            best, best_key = lab, key
    labels = _refine(w, vw, best.copy(), cfg, rng)
    for wf, vwf, cmap in reversed(levels):
        labels = _refine(wf, vwf, labels[cmap].copy(), cfg, rng)
    if labels.min() == labels.max():
        labels[rng.integers(g.n)] ^= 1
    if not is_valid_bisection(g, labels)[0]:
        labels = fix_partition(g, labels)
    return labels


class MultilevelBisector:
    """Topology-only multilevel bisection (ignores node features)."""

    name = "multilevel"

    def __init__(self, cfg: MultilevelConfig | None = None):
        self.cfg = cfg or MultilevelConfig()

    def bisect(self, g: Graph, x: np.ndarray) -> np.ndarray:
        return one_hot(multilevel_bisect(g, self.cfg))


# -- GNN adapter -----------------------------------------------------------------
def gnn_bisect(model: GnnModel, g: Graph, x: np.ndarray) -> np.ndarray:
    return forward(model, g, x)


class GnnBisector:
    name = "gnn"

    def __init__(self, model: GnnModel):
        self.model = model

    def bisect(self, g: Graph, x: np.ndarray) -> np.ndarray:
        return gnn_bisect(self.model, g, x)


def make_bisector(method: str, model: GnnModel | None = None, seed: int = 0):
    """Backend by name: ``gnn``, ``kmeans`` or ``multilevel``."""
    if method == "kmeans":
        return KMeansBisector(KMeansConfig(seed=seed))
    if method == "multilevel":
        return MultilevelBisector(MultilevelConfig(seed=seed))
    if method == "gnn":
        if model is None:
            raise ValueError("the gnn method needs a trained model")
        return GnnBisector(model)
    raise ValueError(f"unknown method {method!r}; expected gnn, kmeans or multilevel")
