"""Mesh quality metrics (uniformity factor, circle ratio), quality tables and
the bisection runtime benchmark."""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from polyagg.agglomerate import AgglomeratedMesh, agglomerate
from polyagg.graph import Graph
from polyagg.mesh import PolyMesh, connectivity_graph, extract_features, generate_mesh, mesh_size


# -- inscribed circle ------------------------------------------------------------
def _segments(loops) -> np.ndarray:
    segs = []
    for p in loops:
        p = np.asarray(p, dtype=np.float64)
        segs.append(np.stack([p, np.roll(p, -1, axis=0)], axis=1))
    return np.concatenate(segs)


def _inside(pts, segs):
    """Even-odd point-in-region test against all boundary segments."""
    a, b = segs[:, 0], segs[:, 1]
    px, py = pts[:, 0:1], pts[:, 1:2]
    straddle = (a[:, 1] > py) != (b[:, 1] > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = a[:, 0] + (py - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1])
    return (np.count_nonzero(straddle & (px < xcross), axis=1) % 2) == 1


def _dist_to_boundary(pts, segs):
    a, ab = segs[:, 0], segs[:, 1] - segs[:, 0]
    ap = pts[:, None, :] - a[None, :, :]
    denom = (ab ** 2).sum(axis=1)
    t = np.clip((ap * ab[None]).sum(axis=2) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    d = ap - t[:, :, None] * ab[None]
    return np.sqrt((d ** 2).sum(axis=2)).min(axis=1)


def inscribed_radius(loops, grid: int = 64, rounds: int = 3, local: int = 21,
                     candidates: int = 5) -> float:
    """Radius of the largest circle inside a region bounded by closed loops.

    ``loops`` is a polygon (``(k, 2)`` array) or a list of them (holes
    allowed, even-odd rule). The distance to the boundary is maximized over
    a ``grid x grid`` sample of the bounding box, then refined around the
    best few samples by ``rounds`` passes of a shrinking local grid.
    """
    if isinstance(loops, np.ndarray) and loops.ndim == 2:
        loops = [loops]
    segs = _segments(loops)
    lo = segs[:, 0].min(axis=0)
    hi = segs[:, 0].max(axis=0)
    step = (hi - lo) / grid
    gx = lo[0] + (np.arange(grid) + 0.5) * step[0]
    gy = lo[1] + (np.arange(grid) + 0.5) * step[1]
    pts = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
    pts = pts[_inside(pts, segs)]
    if len(pts) == 0:
        raise ValueError("region has an empty interior at the sampling resolution")
    d = _dist_to_boundary(pts, segs)
    best = float(d.max())
    for i in np.argsort(d)[::-1][:candidates]:
        c, half = pts[i], step.copy()
        for _ in range(rounds):
            off = np.linspace(-1.0, 1.0, local)
            cand = c + np.stack(np.meshgrid(off * half[0], off * half[1]), axis=-1).reshape(-1, 2)
            cand = cand[_inside(cand, segs)]
            if len(cand) == 0:
                break
            dc = _dist_to_boundary(cand, segs)
            k = int(np.argmax(dc))
            c = cand[k]
            best = max(best, float(dc[k]))
            half = half * (4.0 / (local - 1))
    return best


def circle_ratio(loops, diameter: float | None = None) -> float:
    """Inscribed radius over half the diameter (the circumradius proxy)."""
    if isinstance(loops, np.ndarray) and loops.ndim == 2:
        loops = [loops]
    if diameter is None:
        pts = np.concatenate([np.asarray(p, dtype=np.float64) for p in loops])
        d = pts[:, None, :] - pts[None, :, :]
        diameter = float(np.sqrt((d ** 2).sum(-1)).max())
    return inscribed_radius(loops) / (0.5 * diameter)


# -- per-element metrics -----------------------------------------------------------
def _as_agg(obj) -> AgglomeratedMesh:
    if isinstance(obj, AgglomeratedMesh):
        return obj
    if isinstance(obj, PolyMesh):
        return AgglomeratedMesh.identity(obj)
    raise TypeError(f"expected PolyMesh or AgglomeratedMesh, got {type(obj).__name__}")


def uniformity_factor(obj) -> np.ndarray:
    """Element diameter over the largest element diameter of the same mesh."""
    if isinstance(obj, PolyMesh):
        return obj.diameters / mesh_size(obj)
    diam = _as_agg(obj).coarse_diameters
    return diam / diam.max()


def circle_ratios(obj) -> np.ndarray:
    if isinstance(obj, PolyMesh):
        return np.array([circle_ratio(obj.cell_vertices(i), obj.diameters[i])
                         for i in range(obj.n_cells)])
    agg = _as_agg(obj)
    v = agg.fine.vertices
    return np.array([circle_ratio([v[lp] for lp in loops], d)
                     for loops, d in zip(agg.boundaries, agg.coarse_diameters)])


def _five_numbers(a):
    q = np.quantile(a, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))


@dataclass
class QualityReport:
    uf: np.ndarray
    cr: np.ndarray

    @classmethod
    def of(cls, obj) -> QualityReport:
        return cls(uniformity_factor(obj), circle_ratios(obj))

    @property
    def uf_mean(self) -> float:
        return float(self.uf.mean())

    @property
    def cr_mean(self) -> float:
        return float(self.cr.mean())

    def summary(self) -> dict:
        return {"n_elements": int(len(self.uf)), "uf_mean": self.uf_mean,
                "cr_mean": self.cr_mean, "uf": _five_numbers(self.uf),
                "cr": _five_numbers(self.cr)}


# -- quality tables ------------------------------------------------------------------
QUALITY_COLUMNS = ("mesh_kind", "method", "uf_mean", "cr_mean", "uf_q1", "uf_median",
                   "uf_q3", "cr_q1", "cr_median", "cr_q3")


@dataclass
class QualityTable:
    reports: dict[tuple[str, str], QualityReport | None]
    baseline: str | None = None

    def mean(self, mesh_kind, method, metric="uf"):
        r = self.reports.get((mesh_kind, method))
        if r is None:
            return float("nan")
        return r.uf_mean if metric == "uf" else r.cr_mean

    def relative(self, metric="uf", baseline: str | None = None) -> dict:
        """Mean metric of each method divided by that of the baseline method."""
        base = baseline or self.baseline
        return {(k, m): self.mean(k, m, metric) / self.mean(k, base, metric)
                for (k, m) in self.reports}

    def rows(self) -> list[dict]:
        rows = []
        for (kind, method), r in self.reports.items():
            row = {"mesh_kind": kind, "method": method}
            if r is None:
                row.update({c: "" for c in QUALITY_COLUMNS[2:]})
            else:
                u, c = _five_numbers(r.uf), _five_numbers(r.cr)
                row.update(uf_mean=r.uf_mean, cr_mean=r.cr_mean, uf_q1=u["q1"],
                           uf_median=u["median"], uf_q3=u["q3"], cr_q1=c["q1"],
                           cr_median=c["median"], cr_q3=c["q3"])
            rows.append(row)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=QUALITY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def quality_table(meshes: dict, methods: dict, factor: float = 4.0,
                  baseline: str | None = None) -> QualityTable:
    """Agglomerate every mesh with every method to ``factor * h0`` and score it.

    A method that raises is recorded as a missing entry.
    """
    reports = {}
    for kind, mesh in meshes.items():
        h_star = factor * mesh_size(mesh)
        for name, model in methods.items():
            try:
                reports[(kind, name)] = QualityReport.of(agglomerate(mesh, h_star, model))
            except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                warnings.warn(f"{name} failed on {kind}: {exc}", RuntimeWarning, stacklevel=2)
                reports[(kind, name)] = None
    return QualityTable(reports, baseline)


# -- runtime benchmark -------------------------------------------------------------------
RUNTIME_COLUMNS = ("method", "n_elements", "sample_idx", "seconds")


def bench_sizes(n_meshes: int = 21, smallest: int = 25, largest: int = 5000) -> list[int]:
    return [int(round(v)) for v in np.geomspace(smallest, largest, n_meshes)]


@dataclass
class RuntimeReport:
    samples: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def mean(self, method, n):
        return float(np.mean(self.samples[(method, n)]))

    def std(self, method, n):
        return float(np.std(self.samples[(method, n)]))

    def median(self, method, n):
        return float(np.median(self.samples[(method, n)]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUNTIME_COLUMNS)
        for (method, n), times in self.samples.items():
            for i, t in enumerate(times):
                w.writerow([method, n, i, repr(t)])
        return buf.getvalue()


def _fresh(g: Graph) -> Graph:
    """Same graph without cached derived operators (arrays are shared)."""
    return Graph(g.n, g.indptr, g.indices)


def runtime_bench(methods: dict, sizes=None, samples_per_mesh: int = 20, seed: int = 0,
                  meshes: dict | None = None) -> RuntimeReport:
    """Time one bisection call per (method, Voronoi mesh size).

    Graph and feature extraction are not timed. BLAS is pinned to one thread
    while timing. Samples are taken round-robin over the meshes after one
    untimed warm-up call each, so a transient slowdown of the machine is
    spread over all sizes instead of landing on one of them. Every call gets
    a fresh graph object, so operators cached on the graph are rebuilt as
    they would be for a new subgraph during agglomeration.
    """
    from threadpoolctl import threadpool_limits

    sizes = list(sizes) if sizes is not None else bench_sizes()
    report = RuntimeReport()
    inputs = []
    for k, n in enumerate(sizes):
        mesh = meshes[n] if meshes else generate_mesh("voronoi", n, seed=seed + k)
        inputs.append((mesh.n_cells, connectivity_graph(mesh), extract_features(mesh)))
    with threadpool_limits(limits=1):
        for name, model in methods.items():
            for _, g, x in inputs:
                model.bisect(_fresh(g), x)
            times = {n: [] for n, _, _ in inputs}
            for _ in range(samples_per_mesh):
                for n, g, x in inputs:
                    fresh = _fresh(g)
                    t0 = time.perf_counter()
                    model.bisect(fresh, x)
                    times[n].append(time.perf_counter() - t0)
            for n, _, _ in inputs:
                report.samples[(name, n)] = times[n]
                if np.median(times[n]) < 1e-6:
                    warnings.warn(f"{name} at n={n}: median below timer resolution",
                                  RuntimeWarning, stacklevel=2)
    return report
