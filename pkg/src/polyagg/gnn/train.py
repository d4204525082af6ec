"""Unsupervised training of the GNN bisection model with Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from polyagg._rng import rng_for
from polyagg.errors import NumericalError
from polyagg.gnn.model import GnnModel, forward, loss_and_gradient, ncut_loss
from polyagg.graph import Graph
from polyagg.mesh import MESH_KINDS, PolyMesh, connectivity_graph, extract_features, generate_mesh

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    l2_coeff: float = 1e-5
    batch_size: int = 4
    epochs: int = 300
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.learning_rate < np.inf and 0 <= self.l2_coeff < np.inf):
            raise ValueError("learning rate and L2 coefficient must be finite and non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")


@dataclass
class TrainDatasetSpec:
    """Recipe for a synthetic mesh dataset (counts per mesh kind)."""

    counts: dict[str, int] = field(default_factory=lambda: {k: 200 for k in MESH_KINDS})
    grid_range: tuple[int, int] = (8, 16)
    voronoi_range: tuple[int, int] = (50, 200)
    seed: int = 0

    @classmethod
    def per_type(cls, count: int, seed: int = 0, **kw) -> TrainDatasetSpec:
        return cls(counts={k: count for k in MESH_KINDS}, seed=seed, **kw)

    def entries(self, stream: str = "dataset") -> list[tuple[str, int, int]]:
        """Deterministic ``(kind, n, mesh_seed)`` list."""
        rng = rng_for(self.seed, stream)
        out = []
        for kind in MESH_KINDS:
            lo, hi = self.voronoi_range if kind == "voronoi" else self.grid_range
            for _ in range(int(self.counts.get(kind, 0))):
                out.append((kind, int(rng.integers(lo, hi + 1)), int(rng.integers(2 ** 31))))
        return out

    def build(self, stream: str = "dataset") -> list[PolyMesh]:
        return [generate_mesh(k, n, s) for k, n, s in self.entries(stream)]


@dataclass
class Sample:
    graph: Graph
    features: np.ndarray

    @classmethod
    def from_mesh(cls, mesh: PolyMesh) -> Sample:
        return cls(connectivity_graph(mesh), extract_features(mesh))


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * (g * g)
        m_new[k], v_new[k] = m, v
        new_params[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return new_params, AdamState(t, m_new, v_new)


@dataclass
class TrainResult:
    model: GnnModel
    best_model: GnnModel
    history: list[dict] = field(default_factory=list)


def mean_ncut(model: GnnModel, samples) -> float:
    if not samples:
        return float("nan")
    return float(np.mean([ncut_loss(s.graph, forward(model, s.graph, s.features))[0]
                          for s in samples]))


def train(model: GnnModel, dataset, val_dataset=(), cfg: TrainConfig | None = None,
          callback=None) -> TrainResult:
    """Minimize the summed expected normalized cut over mini-batches.

    ``dataset`` and ``val_dataset`` hold :class:`Sample` objects (meshes are
    converted). History row 0 is the untrained model; every later row is one
    epoch. Losses in the history are mean expected Ncut per graph, without
    the L2 term.
    """
    cfg = cfg or TrainConfig()
    train_set = [s if isinstance(s, Sample) else Sample.from_mesh(s) for s in dataset]
    val_set = [s if isinstance(s, Sample) else Sample.from_mesh(s) for s in val_dataset]
    if not train_set:
        raise ValueError("training dataset is empty")
    rng = rng_for(cfg.seed, "gnn/shuffle")
    model = model.copy()
    state = AdamState()

    val0 = mean_ncut(model, val_set)
    history = [{"epoch": 0, "train_loss": mean_ncut(model, train_set), "val_loss": val0}]
    best, best_val = model.copy(), val0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            value, grads = loss_and_gradient(
                model, [(s.graph, s.features) for s in batch], cfg.l2_coeff)
            if not np.isfinite(value):
                raise NumericalError(f"training diverged at epoch {epoch} (loss {value})",
                                     where="train")
            total += value - cfg.l2_coeff * sum(float((v * v).sum())
                                                 for v in model.params.values())
            model.params, state = adam_step(model.params, grads, state, cfg.learning_rate)
        val = mean_ncut(model, val_set)
        row = {"epoch": epoch, "train_loss": total / len(train_set), "val_loss": val}
        history.append(row)
        if val_set and val < best_val:
            best, best_val = model.copy(), val
        log.info("epoch %d train %.6f val %.6f", epoch, row["train_loss"], val)
        if callback is not None:
            callback(row)
    if not val_set:
        best = model.copy()
    return TrainResult(model=model, best_model=best, history=history)
