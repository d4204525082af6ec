"""Forward maps of the network layers (numpy, float64)."""

import numpy as np

from polyagg.errors import NumericalError


def inorm(x: np.ndarray) -> np.ndarray:
    """Normalize a ``[area, bx, by]`` feature matrix.

    Areas are divided by their max. Barycenters are rotated by 90 degrees
    when the point cloud is taller than wide, then each coordinate column is
    centered and divided by its max absolute value. A column that is
    identically zero after centering stays zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) feature matrix, got {x.shape}")
    area = x[:, 0]
    if np.any(area <= 0):
        raise ValueError("area column must be strictly positive")
    out = np.empty_like(x)
    out[:, 0] = area / area.max()
    bx, by = x[:, 1], x[:, 2]
    if np.ptp(by) > np.ptp(bx):
        bx, by = by, -bx
    for col, c in ((1, bx), (2, by)):
        c = c - c.mean()
        s = np.abs(c).max()
        out[:, col] = c / s if s > 0 else 0.0
    return out


def sage_conv(h, mean_op, w1, w2, activation=np.tanh):
    """``act(h @ w1 + (mean over neighbors of h) @ w2)``.

    ``mean_op`` is the row-normalized adjacency, so isolated nodes aggregate
    to the zero vector.
    """
    if h.shape[1] != w1.shape[0] or h.shape[1] != w2.shape[0]:
        raise ValueError(f"feature width {h.shape[1]} does not match weights "
                         f"{w1.shape} / {w2.shape}")
    return activation(h @ w1 + (mean_op @ h) @ w2)


def dense(h, w, b):
    if h.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: input {h.shape}, weight {w.shape}, bias {b.shape}")
    out = h @ w
    out += b
    return out


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits", where="softmax")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
