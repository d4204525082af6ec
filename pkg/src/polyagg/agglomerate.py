"""Recursive-bisection agglomeration of polygonal meshes and nested hierarchies."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from polyagg.errors import GraphError, MeshError
from polyagg.graph import (
    Graph,
    connected_components,
    fix_partition,
    induced_subgraph,
    is_valid_bisection,
)
from polyagg.mesh import PolyMesh, mesh_size, point_set_diameter, shared_edges
from polyagg.partitioners import KMeansConfig, harden, kmeans_bisect

# relative slack on the stopping rule so that e.g. a 4x4 block of squares
# counts as having diameter exactly 4 h0 despite round-off
DIAM_RTOL = 1e-9


class AgglomeratedMesh:
    """A coarse mesh whose cells are unions of fine cells.

    ``assignment[i]`` is the coarse cell of fine cell ``i``; coarse ids are
    ``0..C-1``.
    """

    def __init__(self, fine: PolyMesh, assignment, h_target: float | None = None,
                 depth: int = 0):
        self.fine = fine
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.shape != (fine.n_cells,):
            raise ValueError(f"assignment needs {fine.n_cells} entries, got {assignment.shape}")
        if fine.n_cells and (assignment.min() < 0 or
                             np.unique(assignment).size != assignment.max() + 1):
            raise ValueError("assignment must map onto 0..C-1")
        assignment.setflags(write=False)
        self.assignment = assignment
        self.h_target = h_target
        self.depth = depth

    @classmethod
    def identity(cls, mesh: PolyMesh, h_target: float | None = None) -> AgglomeratedMesh:
        return cls(mesh, np.arange(mesh.n_cells), h_target)

    @property
    def n_coarse(self) -> int:
        return int(self.assignment.max()) + 1 if self.assignment.size else 0

    def members(self, c: int) -> np.ndarray:
        return self._members[c]

    @cached_property
    def _members(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        splits = np.cumsum(np.bincount(self.assignment, minlength=self.n_coarse))[:-1]
        return np.split(order, splits)

    @cached_property
    def coarse_areas(self) -> np.ndarray:
        return np.bincount(self.assignment, weights=self.fine.areas, minlength=self.n_coarse)

    @cached_property
    def coarse_barycenters(self) -> np.ndarray:
        a = self.fine.areas
        b = self.fine.barycenters
        sx = np.bincount(self.assignment, weights=a * b[:, 0], minlength=self.n_coarse)
        sy = np.bincount(self.assignment, weights=a * b[:, 1], minlength=self.n_coarse)
        return np.column_stack([sx, sy]) / self.coarse_areas[:, None]

    @cached_property
    def coarse_diameters(self) -> np.ndarray:
        return np.array([submesh_diameter(self.fine, m) for m in self._members])

    @cached_property
    def boundaries(self) -> list[list[np.ndarray]]:
        return coarse_boundaries(self)

    def check(self, graph: Graph | None = None, rtol: float = 1e-10):
        """Assert connectivity of every coarse cell and area conservation."""
        g = graph if graph is not None else _fine_graph(self.fine)
        for c, m in enumerate(self._members):
            sub, _ = induced_subgraph(g, m)
            if connected_components(sub).max() > 0:
                raise AssertionError(f"coarse cell {c} is not connected")
        total = self.fine.areas.sum()
        if abs(self.coarse_areas.sum() - total) > rtol * total:
            raise AssertionError("coarse areas do not add up to the fine area")
        loops = self.boundaries
        for c, cell_loops in enumerate(loops):
            enclosed = sum(_signed_area(self.fine.vertices[lp]) for lp in cell_loops)
            if abs(enclosed - self.coarse_areas[c]) > rtol * max(total, 1.0) * 10:
                raise AssertionError(f"boundary of coarse cell {c} does not enclose its area")


def _signed_area(p):
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _fine_graph(mesh):
    from polyagg.mesh import connectivity_graph

    return connectivity_graph(mesh)


def submesh_diameter(mesh: PolyMesh, cells) -> float:
    """Diameter of the union of ``cells`` (largest vertex-to-vertex distance)."""
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size == 0:
        raise MeshError("diameter of an empty cell set")
    off = mesh._offsets
    idx = np.concatenate([np.arange(off[c], off[c + 1]) for c in cells])
    return point_set_diameter(mesh.vertices[np.unique(mesh._flat[idx])])


def coarse_boundaries(agg: AgglomeratedMesh) -> list[list[np.ndarray]]:
    """Boundary loops (vertex-index arrays) of every coarse cell.

    A fine edge belongs to the boundary of coarse cell ``c`` when its owner is
    in ``c`` and the reverse edge is not owned by a cell of ``c``. The edges
    are chained head to tail into closed loops; outer loops are
    counter-clockwise, hole loops clockwise.
    """
    mesh = agg.fine
    tail, head, owner = mesh.directed_edges()
    coarse = agg.assignment[owner]
    nv, nc = max(mesh.n_vertices, 1), max(agg.n_coarse, 1)
    fwd = (tail * nv + head) * nc + coarse
    rev = (head * nv + tail) * nc + coarse
    on_boundary = ~np.isin(rev, fwd)
    out: list[list[np.ndarray]] = [[] for _ in range(agg.n_coarse)]
    bt, bh, bc = tail[on_boundary], head[on_boundary], coarse[on_boundary]
    order = np.argsort(bc, kind="stable")
    bt, bh, bc = bt[order], bh[order], bc[order]
    splits = np.flatnonzero(np.diff(bc)) + 1
    for t_grp, h_grp, c_grp in zip(np.split(bt, splits), np.split(bh, splits),
                                   np.split(bc, splits)):
        if c_grp.size == 0:
            continue
        c = int(c_grp[0])
        succ: dict[int, list[int]] = {}
        for t, h in zip(t_grp.tolist(), h_grp.tolist()):
            succ.setdefault(t, []).append(h)
        remaining = len(t_grp)
        while remaining:
            start = next(v for v, hs in succ.items() if hs)
            loop, v = [start], succ[start].pop()
            remaining -= 1
            while v != start:
                if not succ.get(v):
                    raise MeshError(f"boundary of coarse cell {c} is not closed at vertex {v}")
                loop.append(v)
                v = succ[v].pop()
                remaining -= 1
            out[c].append(np.array(loop, dtype=np.int64))
    for c, loops in enumerate(out):
        if not loops:
            raise MeshError(f"coarse cell {c} has no boundary")
    return out


# -- element sets ------------------------------------------------------------------
@dataclass
class _Elements:
    """Agglomerable items: fine cells, or coarse cells of a previous level."""

    mesh: PolyMesh
    graph: Graph
    features: np.ndarray            # [area, bx, by]
    interface: sp.csr_matrix        # shared boundary length between adjacent items
    vptr: np.ndarray                # CSR of vertex ids per item
    vidx: np.ndarray
    fine_of: list = field(default_factory=list)

    @classmethod
    def from_assignment(cls, mesh: PolyMesh, assignment: np.ndarray) -> _Elements:
        agg = AgglomeratedMesh(mesh, assignment)
        n = agg.n_coarse
        a, b, length = shared_edges(mesh)
        ca, cb = assignment[a], assignment[b]
        keep = ca != cb
        w = sp.coo_matrix((length[keep], (ca[keep], cb[keep])), shape=(n, n)).tocsr()
        w = (w + w.T).tocsr()
        w.sum_duplicates()
        graph = Graph.from_adjacency(w)
        feats = np.column_stack([agg.coarse_areas, agg.coarse_barycenters])
        off, flat = mesh._offsets, mesh._flat
        vlists = []
        for m in agg._members:
            idx = np.concatenate([np.arange(off[c], off[c + 1]) for c in m])
            vlists.append(np.unique(flat[idx]))
        vptr = np.concatenate([[0], np.cumsum([len(v) for v in vlists])])
        return cls(mesh, graph, feats, w, vptr, np.concatenate(vlists), agg._members)

    def diameter(self, items: np.ndarray) -> float:
        idx = np.concatenate([np.arange(self.vptr[i], self.vptr[i + 1]) for i in items])
        return point_set_diameter(self.mesh.vertices[np.unique(self.vidx[idx])])


# -- partition post-processing ----------------------------------------------------
def interface_length(labels, lengths: sp.csr_matrix) -> float:
    coo = lengths.tocoo()
    labels = np.asarray(labels)
    return 0.5 * float(coo.data[labels[coo.row] != labels[coo.col]].sum())


def adjust_partition(g: Graph, labels, lengths: sp.csr_matrix, max_sweeps: int = 3) -> np.ndarray:
    """Greedy interface-length reduction of a valid bisection.

    Sweeps over interface nodes in index order and flips a node when that
    strictly shortens the total interface and leaves both classes connected.
    ``lengths[i, j]`` is the length of the boundary shared by nodes i and j.
    """
    labels = np.asarray(labels, dtype=np.int64).copy()
    lengths = sp.csr_matrix(lengths)
    scale = float(lengths.data.max()) if lengths.nnz else 1.0
    indptr, indices, data = lengths.indptr, lengths.indices, lengths.data
    for _ in range(max_sweeps):
        changed = False
        for u in range(g.n):
            s = labels[u]
            nb, wt = indices[indptr[u]:indptr[u + 1]], data[indptr[u]:indptr[u + 1]]
            other = nb[labels[nb] != s]
            if other.size == 0:
                continue
            gain = wt[labels[nb] != s].sum() - wt[labels[nb] == s].sum()
            if gain <= 1e-12 * scale:
                continue
            rest = np.flatnonzero(labels == s)
            rest = rest[rest != u]
            if rest.size == 0:
                continue
            sub, _ = induced_subgraph(g, rest)
            if connected_components(sub).max() > 0:
                continue
            labels[u] = 1 - s
            changed = True
        if not changed:
            break
    return labels


def _median_split(x: np.ndarray) -> np.ndarray:
    pts = x[:, 1:3]
    axis = int(np.argmax(np.ptp(pts, axis=0)))
    order = np.argsort(pts[:, axis], kind="stable")
    labels = np.zeros(len(pts), dtype=np.int64)
    labels[order[len(pts) // 2:]] = 1
    return labels


def bisect_with_fallback(g: Graph, x: np.ndarray, model) -> np.ndarray:
    """Valid bisection from ``model``; repaired, or replaced when degenerate.

    Fallback order when the model puts every node in one class: k-means on
    barycenters, then a median split along the longest barycenter axis.
    """
    if g.n < 2:
        raise GraphError("cannot bisect a graph with fewer than two nodes")
    candidates = (
        lambda: harden(model.bisect(g, x)),
        lambda: kmeans_bisect(x[:, 1:3], KMeansConfig()),
        lambda: _median_split(x),
    )
    for make in candidates:
        labels = make()
        if labels.min() == labels.max():
            continue
        if not is_valid_bisection(g, labels)[0]:
            labels = fix_partition(g, labels)
        return labels
    raise AssertionError("median split produced an empty class")  # unreachable for n >= 2


# -- agglomeration ------------------------------------------------------------------
def _agglomerate_elements(elems: _Elements, h_star: float, model, adjust: bool = True):
    g = elems.graph
    if g.n == 0:
        return np.zeros(0, dtype=np.int64), 0
    if connected_components(g).max() > 0:
        raise GraphError("agglomeration needs a connected mesh; split it by components first")
    out = np.full(g.n, -1, dtype=np.int64)
    next_id, max_depth = 0, 0
    stack = [(np.arange(g.n), 0)]
    limit = h_star * (1.0 + DIAM_RTOL)
    while stack:
        items, depth = stack.pop()
        max_depth = max(max_depth, depth)
        if len(items) == 1 or elems.diameter(items) <= limit:
            out[items] = next_id
            next_id += 1
            continue
        sub, _ = induced_subgraph(g, items)
        x = elems.features[items]
        labels = bisect_with_fallback(sub, x, model)
        if adjust:
            labels = adjust_partition(sub, labels, elems.interface[items][:, items])
        # push class 1 first so class 0 is numbered first
        stack.append((items[labels == 1], depth + 1))
        stack.append((items[labels == 0], depth + 1))
    return out, max_depth


def agglomerate(mesh: PolyMesh, h_star: float, model, adjust: bool = True) -> AgglomeratedMesh:
    """Recursively bisect ``mesh`` until every part has diameter <= ``h_star``.

    A part made of a single fine cell is never split, even when that cell
    is larger than ``h_star``.
    """
    if not h_star > 0:
        raise ValueError("target size must be positive")
    elems = _Elements.from_assignment(mesh, np.arange(mesh.n_cells))
    labels, depth = _agglomerate_elements(elems, h_star, model, adjust)
    return AgglomeratedMesh(mesh, labels, h_star, depth)


@dataclass
class Hierarchy:
    """Nested agglomerations; ``levels[0]`` is the fine mesh itself."""

    levels: list[AgglomeratedMesh]
    factors: list[float]
    h0: float

    @property
    def target_sizes(self) -> list[float]:
        return [lvl.h_target for lvl in self.levels]

    def check_nested(self):
        for k in range(len(self.levels) - 1):
            fine, coarse = self.levels[k].assignment, self.levels[k + 1].assignment
            # each level-k cell must map to a single level-(k+1) cell
            pairs = np.unique(np.column_stack([fine, coarse]), axis=0)
            if len(pairs) != self.levels[k].n_coarse:
                raise AssertionError(f"level {k + 1} is not nested in level {k}")


def build_hierarchy(mesh: PolyMesh, factors, model, adjust: bool = True) -> Hierarchy:
    """Agglomerate to ``factor * h0`` for each factor, each level built from
    the coarse cells of the previous one (so levels are nested).

    A factor of 1 reproduces the fine mesh.
    """
    factors = [float(f) for f in factors]
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise ValueError("factors must be strictly increasing")
    if any(f < 1 for f in factors):
        raise ValueError("factors must be >= 1")
    h0 = mesh_size(mesh)
    levels = [AgglomeratedMesh.identity(mesh, h0)]
    for f in factors:
        prev = levels[-1]
        if f == 1.0:
            levels.append(AgglomeratedMesh(mesh, prev.assignment, h0))
            continue
        elems = _Elements.from_assignment(mesh, prev.assignment)
        coarse_of_prev, depth = _agglomerate_elements(elems, f * h0, model, adjust)
        levels.append(AgglomeratedMesh(mesh, coarse_of_prev[prev.assignment], f * h0, depth))
    return Hierarchy(levels, factors, h0)
