"""Minibatch container shared by objectives, trainer and metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError

IGNORE = -1


@dataclass(frozen=True)
class Batch:
    """Model inputs plus targets.

    For sequence models ``inputs`` and ``targets`` are ``(batch, time)``
    integer arrays and ``targets == IGNORE`` marks unsupervised positions.
    For classifiers ``inputs`` is ``(batch, features)`` and ``targets`` is
    ``(batch,)``.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.inputs)

    @property
    def mask(self) -> np.ndarray:
        return self.targets != IGNORE

    def take(self, index) -> "Batch":
        return Batch(self.inputs[index], self.targets[index])

    def split(self) -> tuple["Batch", "Batch"]:
        half = len(self) // 2
        if half == 0:
            raise ArgumentError("cannot split a batch with fewer than 2 rows")
        return self.take(slice(0, half)), self.take(slice(half, 2 * half))

    @staticmethod
    def concat(batches) -> "Batch":
        return Batch(np.concatenate([b.inputs for b in batches]),
                     np.concatenate([b.targets for b in batches]))


def supervised_rows(logits, batch: Batch):
    """Flatten supervised positions to ``(rows, y, index)``.

    ``index`` addresses the supervised entries of ``logits[..., :]`` so
    per-row gradients can be scattered back.
    """
    if len(batch) == 0:
        raise ArgumentError("empty batch")
    mask = batch.mask
    if not mask.any():
        raise ArgumentError("batch has no supervised positions")
    index = np.nonzero(mask)
    z = np.ascontiguousarray(logits[index])
    y = np.ascontiguousarray(batch.targets[index], dtype=np.int64)
    if y.min() < 0 or y.max() >= logits.shape[-1]:
        raise ArgumentError(f"target out of range [0, {logits.shape[-1]})")
    return z, y, index
