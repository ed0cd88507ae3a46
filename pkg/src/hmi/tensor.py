"""Dense float64 kernels.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 and matrix
batches are 3-D arrays whose leading axis is the batch.  The row-wise
operations (``relu``, ``add_bias``, ``layer_norm``, ``softmax_rows``) act on
the last axis and therefore accept any leading batch shape.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError

LAYER_NORM_EPS = 1e-5


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DimensionError(f"{name} contains non-finite values")
    return a


def as_batch(x, name: str = "batch") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] < 1:
        raise DimensionError(f"{name} must be a non-empty 3-D stack, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def batched_matmul(c, a, b, alpha: float = 1.0, beta: float = 1.0) -> np.ndarray:
    """Return ``beta * c[i] + alpha * (a[i] @ b[i])`` for every batch element.

    ``c`` may also be any array broadcastable to the output shape, which is
    how per-element bias rows are folded into the product.
    """
    a = as_batch(a, "a")
    b = as_batch(b, "b")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"batch counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched_matmul: {a.shape} @ {b.shape}")
    out_shape = (a.shape[0], a.shape[1], b.shape[2])
    c = np.asarray(c, dtype=np.float64)
    try:
        np.broadcast_to(c, out_shape)
    except ValueError:
        raise DimensionError(f"c of shape {c.shape} does not conform to {out_shape}") from None
    if c.ndim == 3 and c.shape[0] not in (1, a.shape[0]):
        raise DimensionError(f"batch counts differ: c has {c.shape[0]}")
    if alpha == 0.0:
        return np.broadcast_to(beta * c, out_shape).copy()
    prod = a @ b
    if alpha != 1.0:
        prod = alpha * prod
    if beta == 0.0:
        return prod
    if beta != 1.0:
        c = beta * c
    return c + prod


def linear(x, w, b=None) -> np.ndarray:
    """``x @ w (+ b)`` over any leading batch shape of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input with {x.shape[-1]} columns, weight {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def add_bias(x, bias) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias of shape {bias.shape} for input with {x.shape[-1]} columns")
    return x + bias


def layer_norm(x, gain, shift, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    cols = x.shape[-1]
    if gain.shape != (cols,) or shift.shape != (cols,):
        raise DimensionError(f"layer_norm parameters {gain.shape}/{shift.shape} for {cols} columns")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + shift


def softmax_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


_OPS: dict[str, Callable[..., np.ndarray]] = {
    "relu": relu,
    "add_bias": add_bias,
    "layer_norm": layer_norm,
    "softmax_rows": softmax_rows,
}


def elementwise(op: str, x, *params) -> np.ndarray:
    """Dispatch one of ``relu``, ``add_bias``, ``layer_norm``, ``softmax_rows`` by name."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(as_matrix(x, "x"), *params)
