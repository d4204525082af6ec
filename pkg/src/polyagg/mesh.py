"""Polygonal mesh data model, element geometry, generators and file I/O.

A :class:`PolyMesh` is a list of 2D vertices plus a list of cells, each cell
being a counter-clockwise loop of vertex indices. Meshes are immutable once
built; derived geometry (areas, barycenters, diameters) is computed lazily
and cached.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, QhullError, Voronoi, cKDTree

from polyagg._io import atomic_write_text
from polyagg._rng import rng_for
from polyagg.errors import MeshError, MeshFormatError
from polyagg.graph import Graph

MESH_MAGIC = "polyagg-mesh v1"
MESH_KINDS = ("squares", "triangles", "random-triangles", "voronoi")


class PolyMesh:
    """Vertices plus counter-clockwise polygonal cells.

    Parameters
    ----------
    vertices : array_like, shape (V, 2)
    cells : sequence of sequences of int
        Vertex-index loops, one per cell, counter-clockwise.
    validate : bool
        Check index range, repeated indices and orientation.
    """

    def __init__(self, vertices, cells, validate: bool = True):
        vertices = np.array(vertices, dtype=np.float64, copy=True)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError(f"vertices must have shape (V, 2), got {vertices.shape}")
        vertices.setflags(write=False)
        self._vertices = vertices
        self._cells = tuple(tuple(int(i) for i in c) for c in cells)
        sizes = np.fromiter((len(c) for c in self._cells), dtype=np.int64,
                            count=len(self._cells))
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])
        self._flat = np.fromiter((i for c in self._cells for i in c),
                                 dtype=np.int64, count=int(self._offsets[-1]))
        if validate:
            self._validate()

    def _validate(self):
        nv = len(self._vertices)
        if not np.all(np.isfinite(self._vertices)):
            raise MeshError("non-finite vertex coordinates")
        for ci, c in enumerate(self._cells):
            if len(c) < 3:
                raise MeshError(f"cell {ci} has {len(c)} vertices (need >= 3)", cell=ci)
            if min(c) < 0 or max(c) >= nv:
                raise MeshError(f"cell {ci} references a vertex index out of range [0, {nv})",
                                cell=ci)
            if len(set(c)) != len(c):
                raise MeshError(f"cell {ci} repeats a vertex index", cell=ci)
        bad = np.flatnonzero(self.signed_areas <= 0.0)
        if bad.size:
            raise MeshError(f"cell {int(bad[0])} is not counter-clockwise "
                            f"(signed area {self.signed_areas[bad[0]]:.3g})", cell=int(bad[0]))

    # -- basic accessors -------------------------------------------------
    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def cells(self) -> tuple[tuple[int, ...], ...]:
        return self._cells

    @property
    def n_cells(self) -> int:
        return len(self._cells)

    @property
    def n_vertices(self) -> int:
        return len(self._vertices)

    def __len__(self):
        return self.n_cells

    def __repr__(self):
        return f"PolyMesh(n_vertices={self.n_vertices}, n_cells={self.n_cells})"

    def cell_vertices(self, i: int) -> np.ndarray:
        """Coordinates of cell ``i`` as a (k, 2) array."""
        self._check_index(i)
        return self._vertices[list(self._cells[i])]

    @property
    def domain_bbox(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the vertices actually used by cells."""
        used = self._vertices[np.unique(self._flat)]
        lo, hi = used.min(axis=0), used.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def _check_index(self, i):
        if not 0 <= i < self.n_cells:
            raise IndexError(f"cell index {i} out of range for mesh with {self.n_cells} cells")

    # -- flat edge structure ----------------------------------------------
    @cached_property
    def _next_flat(self) -> np.ndarray:
        sizes = np.diff(self._offsets)
        start = np.repeat(self._offsets[:-1], sizes)
        pos = np.arange(self._offsets[-1])
        return start + (pos - start + 1) % np.repeat(np.maximum(sizes, 1), sizes)

    @cached_property
    def _cell_of_flat(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_cells), np.diff(self._offsets))

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All directed cell edges as (tail, head, owning_cell) arrays."""
        return self._flat, self._flat[self._next_flat], self._cell_of_flat

    # -- geometry ---------------------------------------------------------
    @cached_property
    def _shoelace(self):
        # relative to each cell's first vertex for accuracy
        ref = np.repeat(self._vertices[self._flat[self._offsets[:-1]]],
                        np.diff(self._offsets), axis=0)
        p = self._vertices[self._flat] - ref
        q = self._vertices[self._flat[self._next_flat]] - ref
        cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
        starts = self._offsets[:-1]
        if self.n_cells == 0:
            return np.zeros(0), np.zeros((0, 2))
        twice_area = np.add.reduceat(cross, starts)
        mx = np.add.reduceat((p[:, 0] + q[:, 0]) * cross, starts)
        my = np.add.reduceat((p[:, 1] + q[:, 1]) * cross, starts)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.column_stack([mx, my]) / (3.0 * twice_area)[:, None]
        c = c + self._vertices[self._flat[starts]]
        return 0.5 * twice_area, c

    @property
    def signed_areas(self) -> np.ndarray:
        return self._shoelace[0]

    @cached_property
    def areas(self) -> np.ndarray:
        a = self._shoelace[0].copy()
        a.setflags(write=False)
        return a

    @cached_property
    def barycenters(self) -> np.ndarray:
        b = self._shoelace[1].copy()
        b.setflags(write=False)
        return b

    @cached_property
    def diameters(self) -> np.ndarray:
        sizes = np.diff(self._offsets)
        out = np.empty(self.n_cells)
        # group cells by vertex count so each group is one dense computation
        for k in np.unique(sizes):
            idx = np.flatnonzero(sizes == k)
            loops = self._flat[self._offsets[idx][:, None] + np.arange(k)]
            pts = self._vertices[loops]
            d = pts[:, :, None, :] - pts[:, None, :, :]
            out[idx] = np.sqrt((d ** 2).sum(-1)).max(axis=(1, 2))
        out.setflags(write=False)
        return out


# -- element geometry operations ------------------------------------------
def element_area(mesh: PolyMesh, i: int) -> float:
    mesh._check_index(i)
    return float(mesh.areas[i])


def element_barycenter(mesh: PolyMesh, i: int) -> np.ndarray:
    """Area-weighted centroid of cell ``i``."""
    mesh._check_index(i)
    if not mesh.signed_areas[i] > 0:
        raise MeshError(f"cell {i} is degenerate (zero area); barycenter undefined")
    return mesh.barycenters[i].copy()


def element_diameter(mesh: PolyMesh, i: int) -> float:
    """Largest distance between two vertices of cell ``i``."""
    mesh._check_index(i)
    return float(mesh.diameters[i])


def mesh_size(mesh: PolyMesh) -> float:
    """The mesh size h, i.e. the largest element diameter."""
    if mesh.n_cells == 0:
        raise MeshError("mesh size of an empty mesh is undefined")
    return float(mesh.diameters.max())


def point_set_diameter(points: np.ndarray) -> float:
    """Largest pairwise distance in a 2D point cloud."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    if len(points) > 64:
        try:
            points = points[ConvexHull(points).vertices]
        except QhullError:
            # collinear cloud: the extreme points along the principal axis suffice
            axis = points[np.argmax(np.linalg.norm(points - points[0], axis=1))] - points[0]
            t = points @ axis
            points = points[[np.argmin(t), np.argmax(t)]]
    d = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1)).max())


def shared_edges(mesh: PolyMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Geometric edges shared by two cells.

    Returns ``(cell_a, cell_b, length)`` with ``cell_a < cell_b``, one entry
    per shared edge (two cells sharing two edges appear twice). Edges are
    matched by their unordered vertex-index pair, so hanging nodes are not
    detected as adjacency.
    """
    tail, head, owner = mesh.directed_edges()
    lo, hi = np.minimum(tail, head), np.maximum(tail, head)
    key = lo * max(mesh.n_vertices, 1) + hi
    order = np.argsort(key, kind="stable")
    key_s = key[order]
    same = np.flatnonzero(key_s[1:] == key_s[:-1])
    if same.size and np.any(np.diff(same) == 1):
        e = order[same[np.flatnonzero(np.diff(same) == 1)[0]]]
        raise MeshError(f"edge ({lo[e]}, {hi[e]}) is shared by more than two cells")
    a, b = owner[order[same]], owner[order[same + 1]]
    ea = order[same]
    length = np.linalg.norm(mesh.vertices[head[ea]] - mesh.vertices[tail[ea]], axis=1)
    keep = a != b
    a, b, length = a[keep], b[keep], length[keep]
    return np.minimum(a, b), np.maximum(a, b), length


def connectivity_graph(mesh: PolyMesh) -> Graph:
    """Graph with one node per cell and an edge between cells sharing an edge."""
    a, b, _ = shared_edges(mesh)
    return Graph.from_edges(mesh.n_cells, np.column_stack([a, b]))


def extract_features(mesh: PolyMesh) -> np.ndarray:
    """Per-cell ``[area, barycenter_x, barycenter_y]`` matrix (un-normalized)."""
    if np.any(mesh.areas <= 0):
        raise MeshError("degenerate cell with non-positive area")
    return np.column_stack([mesh.areas, mesh.barycenters])


# -- generators -------------------------------------------------------------
def _grid_vertices(n):
    t = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(t, t, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def _squares(n):
    v = _grid_vertices(n)
    cells = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            cells.append((a, a + 1, a + n + 2, a + n + 1))
    return v, cells


def _triangles(n):
    v = _grid_vertices(n)
    cells = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b, c, d = a + 1, a + n + 2, a + n + 1
            cells.append((a, b, c))
            cells.append((a, c, d))
    return v, cells


def _random_triangles(n, rng):
    v, cells = _triangles(n)
    v = v.copy()
    interior = np.flatnonzero((v[:, 0] > 0) & (v[:, 0] < 1) & (v[:, 1] > 0) & (v[:, 1] < 1))
    amp = 0.25 / n
    v[interior] += rng.uniform(-amp, amp, size=(interior.size, 2))
    return v, cells


def _voronoi_once(seeds, weld_tol=1e-10):
    n = len(seeds)
    x, y = seeds[:, 0], seeds[:, 1]
    mirrored = np.concatenate([
        seeds,
        np.column_stack([-x, y]), np.column_stack([2.0 - x, y]),
        np.column_stack([x, -y]), np.column_stack([x, 2.0 - y]),
    ])
    vor = Voronoi(mirrored)
    verts = vor.vertices.copy()
    # reflection makes cell boundaries land on the square; remove round-off
    verts[np.abs(verts) < 1e-12] = 0.0
    verts[np.abs(verts - 1.0) < 1e-12] = 1.0
    regions = []
    for i in range(n):
        reg = vor.regions[vor.point_region[i]]
        if not reg or -1 in reg:
            raise MeshError("unbounded Voronoi region for an interior seed")
        regions.append(np.asarray(reg))
    used = np.unique(np.concatenate(regions))
    # weld coincident vertices produced by degenerate (cocircular) configurations
    parent = np.arange(len(used))
    for a, b in sorted(cKDTree(verts[used]).query_pairs(weld_tol)):
        ra, rb = parent[a], parent[b]
        while parent[ra] != ra:
            ra = parent[ra]
        while parent[rb] != rb:
            rb = parent[rb]
        parent[max(ra, rb)] = min(ra, rb)
    for k in range(len(parent)):
        r = k
        while parent[r] != r:
            r = parent[r]
        parent[k] = r
    roots, compact = np.unique(parent, return_inverse=True)
    remap = np.full(len(verts), -1)
    remap[used] = compact
    out_verts = np.clip(verts[used[roots]], 0.0, 1.0)
    cells = []
    for i, reg in enumerate(regions):
        pts = verts[reg]
        ang = np.arctan2(pts[:, 1] - seeds[i, 1], pts[:, 0] - seeds[i, 0])
        loop = remap[reg[np.argsort(ang)]]
        keep = loop != np.roll(loop, 1)
        loop = loop[keep]
        if len(loop) < 3 or len(set(loop.tolist())) != len(loop):
            raise MeshError(f"degenerate Voronoi cell {i}")
        cells.append(loop.tolist())
    return out_verts, cells


def _is_conforming(mesh: PolyMesh) -> bool:
    tail, head, _ = mesh.directed_edges()
    fwd = set(zip(tail.tolist(), head.tolist()))
    v = mesh.vertices
    for t, h in fwd:
        if (h, t) in fwd:
            continue
        # unmatched edges must lie on the boundary of the unit square
        on_side = False
        for axis in (0, 1):
            for val in (0.0, 1.0):
                if v[t, axis] == val and v[h, axis] == val:
                    on_side = True
        if not on_side:
            return False
    return True


def generate_mesh(kind: str, n: int, seed: int = 0, max_retries: int = 10) -> PolyMesh:
    """Synthetic mesh of the unit square.

    ``kind`` is one of ``squares`` (n x n squares), ``triangles`` (each square
    split in two), ``random-triangles`` (interior vertices jittered by up to
    ``0.25/n`` per coordinate) or ``voronoi`` (``n`` uniformly random seeds).
    """
    if kind not in MESH_KINDS:
        raise ValueError(f"unknown mesh kind {kind!r}; expected one of {MESH_KINDS}")
    n = int(n)
    if kind == "voronoi":
        if n < 4:
            raise ValueError("voronoi meshes need at least 4 seeds")
    elif n < 2:
        raise ValueError("grid resolution must be at least 2")
    rng = rng_for(seed, f"mesh/{kind}")
    if kind == "squares":
        return PolyMesh(*_squares(n))
    if kind == "triangles":
        return PolyMesh(*_triangles(n))
    if kind == "random-triangles":
        return PolyMesh(*_random_triangles(n, rng))
    last = None
    for _ in range(max_retries):
        seeds = rng.uniform(0.0, 1.0, size=(n, 2))
        try:
            mesh = PolyMesh(*_voronoi_once(seeds))
        except (MeshError, QhullError) as exc:
            last = exc
            continue
        if _is_conforming(mesh):
            return mesh
        last = MeshError("non-conforming Voronoi mesh")
    raise MeshError(f"could not build a valid Voronoi mesh after {max_retries} attempts: {last}")


# -- file I/O ---------------------------------------------------------------
def format_mesh(mesh: PolyMesh) -> str:
    lines = [MESH_MAGIC, f"V {mesh.n_vertices}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices]
    lines.append(f"C {mesh.n_cells}")
    lines += [" ".join(str(t) for t in (len(c), *c)) for c in mesh.cells]
    return "\n".join(lines) + "\n"


def save_mesh(mesh: PolyMesh, path):
    atomic_write_text(path, format_mesh(mesh))


def parse_mesh(text: str) -> PolyMesh:
    """Parse the text mesh format (see :func:`load_mesh`)."""
    lines = text.splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise MeshFormatError("unexpected end of file", line=pos + 1)
        pos += 1
        return pos, lines[pos - 1].split()

    ln, tok = next_line()
    if " ".join(tok) != MESH_MAGIC:
        raise MeshFormatError(f"expected header {MESH_MAGIC!r}", line=ln)

    def count(tag):
        ln, tok = next_line()
        if len(tok) != 2 or tok[0] != tag:
            raise MeshFormatError(f"expected '{tag} <count>'", line=ln)
        try:
            c = int(tok[1])
        except ValueError:
            raise MeshFormatError(f"bad count {tok[1]!r}", line=ln) from None
        if c < 0:
            raise MeshFormatError("negative count", line=ln)
        return c

    nv = count("V")
    verts = np.empty((nv, 2))
    for k in range(nv):
        ln, tok = next_line()
        if len(tok) != 2:
            raise MeshFormatError("vertex record needs two coordinates", line=ln)
        try:
            verts[k] = float(tok[0]), float(tok[1])
        except ValueError:
            raise MeshFormatError("non-numeric vertex coordinate", line=ln) from None
    nc = count("C")
    cells, cell_lines = [], []
    for k in range(nc):
        ln, tok = next_line()
        try:
            rec = [int(t) for t in tok]
        except ValueError:
            raise MeshFormatError("non-integer cell record", line=ln) from None
        if not rec or rec[0] != len(rec) - 1:
            raise MeshFormatError("cell record length does not match its count", line=ln)
        cells.append(rec[1:])
        cell_lines.append(ln)
    while pos < len(lines):
        if lines[pos].strip():
            raise MeshFormatError("trailing data after cell records", line=pos + 1)
        pos += 1
    try:
        return PolyMesh(verts, cells)
    except MeshError as exc:
        line = cell_lines[exc.cell] if exc.cell is not None else None
        raise MeshFormatError(str(exc), line=line) from None


def load_mesh(path) -> PolyMesh:
    """Read a mesh file.

    Format (text, line oriented)::

        polyagg-mesh v1
        V <num_vertices>
        x y                # one per vertex
        C <num_cells>
        k i1 i2 ... ik     # one per cell, CCW, 0-based

    Cells are adjacent only when they share a whole edge (same two vertex
    indices); meshes with hanging nodes load fine but such contacts are not
    treated as adjacency.
    """
    with open(path) as f:
        return parse_mesh(f.read())
