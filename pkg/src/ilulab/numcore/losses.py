"""Numerically stable classification losses on 2-D logit arrays."""
import numpy as np

from ..errors import ArgumentError, NumericError
from . import kernels


def check_rows(logits, targets):
    """Validate ``(logits, targets)`` and return contiguous float64/int64 copies."""
    z = np.ascontiguousarray(logits, dtype=np.float64)
    y = np.ascontiguousarray(targets, dtype=np.int64)
    if z.ndim != 2:
        raise ArgumentError(f"logits must be 2-D, got shape {z.shape}")
    n, c = z.shape
    if c < 2:
        raise ArgumentError(f"need at least 2 classes, got {c}")
    if y.shape != (n,):
        raise ArgumentError(f"targets shape {y.shape} does not match {n} rows")
    if n and (y.min() < 0 or y.max() >= c):
        bad = int(y[(y < 0) | (y >= c)][0])
        raise ArgumentError(f"target {bad} out of range [0, {c})")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    return z, y


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over rows and its gradient with respect to ``logits``.

    The gradient row for example ``i`` is ``(softmax(z_i) - onehot(y_i)) / n``.
    """
    z, y = check_rows(logits, targets)
    n = z.shape[0]
    if n == 0:
        raise ArgumentError("empty batch")
    nll, dz, _, _ = kernels.ce_rows(z, y, False)
    return float(nll.sum() / n), dz / n


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
