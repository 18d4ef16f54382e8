"""Plain-array helper ops mirrored by the autodiff graph."""

import numpy as np

from ..errors import ShapeError


def linear(W, b, x):
    """W @ x + b with shape validation."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != x.shape[0] or b.shape != (W.shape[0],):
        raise ShapeError(f"linear: W{W.shape}, b{b.shape}, x{x.shape} inconsistent")
    return W @ x + b


def mse(pred, target):
    """Mean over all elements of squared differences."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    return float(np.mean((pred - target) ** 2))
