"""GNN bisection model: parameters, forward pass, loss and exact gradients.

Architecture: INorm -> SAGEConv stack (tanh) -> Dense stack (tanh between
hidden layers, none before the output) -> Softmax over two classes.
Gradients are accumulated in reverse mode by hand; every layer caches what
its adjoint needs during the forward pass.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from polyagg._io import atomic_write_text
from polyagg._rng import rng_for
from polyagg.errors import ModelFormatError, NumericalError
from polyagg.gnn.layers import dense, inorm, softmax
from polyagg.graph import Graph

MODEL_MAGIC = "polyagg-gnn v1"
GAMMA_EPS = 1e-12


@dataclass(frozen=True)
class Architecture:
    feature_width: int = 3
    conv_widths: tuple[int, ...] = (64, 64, 64, 64)
    dense_widths: tuple[int, ...] = (32, 8, 2)

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if not self.conv_widths or not self.dense_widths:
            raise ValueError("need at least one conv and one dense layer")
        if self.dense_widths[-1] != 2:
            raise ValueError("the output layer must have width 2")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter name -> shape, in storage order."""
        out = {}
        fin = self.feature_width
        for l, w in enumerate(self.conv_widths):
            out[f"conv{l}.W1"] = (fin, w)
            out[f"conv{l}.W2"] = (fin, w)
            fin = w
        for l, w in enumerate(self.dense_widths):
            out[f"dense{l}.W"] = (fin, w)
            out[f"dense{l}.b"] = (w,)
            fin = w
        return out


@dataclass
class GnnModel:
    arch: Architecture = field(default_factory=Architecture)
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0, arch: Architecture | None = None) -> GnnModel:
        """Glorot-uniform weights, zero biases."""
        arch = arch or Architecture()
        rng = rng_for(seed, "gnn/init")
        params = {}
        for name, shape in arch.shapes().items():
            if len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                lim = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-lim, lim, size=shape)
        return cls(arch, params)

    @classmethod
    def zeros(cls, arch: Architecture | None = None) -> GnnModel:
        arch = arch or Architecture()
        return cls(arch, {k: np.zeros(s) for k, s in arch.shapes().items()})

    def copy(self) -> GnnModel:
        return GnnModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    def parameter_count(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))

    def forward(self, g: Graph, x) -> np.ndarray:
        return forward(self, g, x)


def _check_finite(a, where):
    if not np.all(np.isfinite(a)):
        raise NumericalError("non-finite values", where=where)


def forward(model: GnnModel, g: Graph, x, cache: dict | None = None) -> np.ndarray:
    """Class probabilities Y (N x 2) for graph ``g`` with raw features ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.n, model.arch.feature_width):
        raise ValueError(f"features have shape {x.shape}, expected "
                         f"({g.n}, {model.arch.feature_width})")
    p = model.params
    mean_op = g.mean_operator
    h = inorm(x)
    convs = []
    for l in range(len(model.arch.conv_widths)):
        agg = mean_op @ h
        # in place: large temporaries dominate the cost on big graphs.
        # Overflow is reported by _check_finite, not by numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            out = h @ p[f"conv{l}.W1"]
            out += agg @ p[f"conv{l}.W2"]
            np.tanh(out, out=out)
        _check_finite(out, f"conv{l}")
        convs.append((h, agg, out))
        h = out
    denses = []
    n_dense = len(model.arch.dense_widths)
    for l in range(n_dense):
        with np.errstate(over="ignore", invalid="ignore"):
            z = dense(h, p[f"dense{l}.W"], p[f"dense{l}.b"])
        out = np.tanh(z, out=z) if l < n_dense - 1 else z
        _check_finite(out, f"dense{l}")
        denses.append((h, out))
        h = out
    y = softmax(h)
    if cache is not None:
        cache.update(convs=convs, denses=denses, y=y, mean_op=mean_op)
    return y


def ncut_loss(g: Graph, y: np.ndarray, eps: float = GAMMA_EPS) -> tuple[float, np.ndarray]:
    """Expected normalized cut with guarded volumes, and its gradient wrt Y.

    ``sum_k sum_ij A_ij Y_ik (1 - Y_jk) / (Gamma_k + eps)``, Gamma = Y^T D.
    """
    d = g.degrees.astype(np.float64)
    ay = g.adjacency @ y
    gamma = y.T @ d + eps
    num = y.T @ d - np.einsum("ik,ik->k", y, ay)
    value = float((num / gamma).sum())
    dy = (d[:, None] - 2.0 * ay) / gamma - d[:, None] * (num / gamma ** 2)
    return value, dy


def l2_penalty(model: GnnModel) -> float:
    return float(sum((v * v).sum() for v in model.params.values()))


def loss(g: Graph, y, model: GnnModel | None = None, l2_coeff: float = 0.0) -> float:
    """Training objective for one graph: guarded expected Ncut plus L2 term."""
    value, _ = ncut_loss(g, np.asarray(y, dtype=np.float64))
    if model is not None and l2_coeff:
        value += l2_coeff * l2_penalty(model)
    return value


def _backward(model: GnnModel, cache: dict, dy: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    grads = {}
    y = cache["y"]
    dh = y * (dy - (dy * y).sum(axis=1, keepdims=True))
    n_dense = len(cache["denses"])
    for l in reversed(range(n_dense)):
        h_in, out = cache["denses"][l]
        if l < n_dense - 1:
            dh = dh * (1.0 - out * out)
        grads[f"dense{l}.W"] = h_in.T @ dh
        grads[f"dense{l}.b"] = dh.sum(axis=0)
        dh = dh @ p[f"dense{l}.W"].T
        _check_finite(dh, f"dense{l} (backward)")
    mean_t = cache["mean_op"].T
    for l in reversed(range(len(cache["convs"]))):
        h_in, agg, out = cache["convs"][l]
        dpre = dh * (1.0 - out * out)
        grads[f"conv{l}.W1"] = h_in.T @ dpre
        grads[f"conv{l}.W2"] = agg.T @ dpre
        if l > 0:
            dh = dpre @ p[f"conv{l}.W1"].T + mean_t @ (dpre @ p[f"conv{l}.W2"].T)
            _check_finite(dh, f"conv{l} (backward)")
    return {k: grads[k] for k in p}


def loss_and_gradient(model: GnnModel, graphs, l2_coeff: float = 0.0):
    """Summed loss and parameter gradients over ``(graph, features)`` pairs.

    The expected-Ncut terms are summed over the graphs; the L2 term
    ``l2_coeff * ||params||^2`` is added once.
    """
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for g, x in graphs:
        cache = {}
        y = forward(model, g, x, cache)
        value, dy = ncut_loss(g, y)
        if not np.isfinite(value):
            raise NumericalError("non-finite loss", where="loss")
        total += value
        for k, v in _backward(model, cache, dy).items():
            grads[k] += v
    if l2_coeff:
        total += l2_coeff * l2_penalty(model)
        for k, v in model.params.items():
            grads[k] += 2.0 * l2_coeff * v
    return total, grads


def gradient(model: GnnModel, g: Graph, x, l2_coeff: float = 0.0) -> dict[str, np.ndarray]:
    return loss_and_gradient(model, [(g, x)], l2_coeff)[1]


# -- serialization ------------------------------------------------------------
def model_to_dict(model: GnnModel) -> dict:
    arch = asdict(model.arch)
    arch["conv_widths"] = list(arch["conv_widths"])
    arch["dense_widths"] = list(arch["dense_widths"])
    return {
        "magic": MODEL_MAGIC,
        "architecture": arch,
        "params": [
            {"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
            for k, v in model.params.items()
        ],
    }


def model_from_dict(doc: dict) -> GnnModel:
    if not isinstance(doc, dict) or doc.get("magic") != MODEL_MAGIC:
        found = doc.get("magic") if isinstance(doc, dict) else None
        raise ModelFormatError(f"unsupported model format {found!r}, expected {MODEL_MAGIC!r}")
    try:
        arch = Architecture(**doc["architecture"])
        expected = arch.shapes()
        params = {}
        for rec in doc["params"]:
            name, shape = rec["name"], tuple(rec["shape"])
            if expected.get(name) != shape:
                raise ModelFormatError(f"parameter {name!r} has shape {shape}, "
                                       f"architecture expects {expected.get(name)}")
            arr = np.array(rec["data"], dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise ModelFormatError(f"parameter {name!r} has {arr.size} values for shape {shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelFormatError(f"parameter {name!r} contains non-finite values")
            params[name] = arr.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model file: {exc}") from None
    missing = set(expected) - set(params)
    if missing:
        raise ModelFormatError(f"missing parameters: {sorted(missing)}")
    return GnnModel(arch, {k: params[k] for k in expected})


def save_model(model: GnnModel, path):
    atomic_write_text(path, json.dumps(model_to_dict(model)))


def load_model(path) -> GnnModel:
    with open(os.fspath(path)) as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"cannot parse model file {path}: {exc}") from None
    return model_from_dict(doc)
