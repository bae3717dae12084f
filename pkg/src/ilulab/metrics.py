"""Forget quality, utility/fine-tuning accuracy and robust accuracy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .batches import Batch
from .errors import ArgumentError
from .models import Tape

# Stand-in for the pre-fine-tune utility benchmark at toy scale.
UTILITY_NOTE = "utility = held-out retain-domain accuracy (stands in for MMLU zero-shot accuracy)"


def accuracy(params, batch: Batch, chunk=256) -> float:
    """Fraction of supervised positions whose argmax prediction equals the target."""
    if len(batch) == 0:
        raise ArgumentError("empty evaluation set")
    correct = 0
    total = 0
    for start in range(0, len(batch), chunk):
        part = batch.take(slice(start, start + chunk))
        logits = Tape(params, part.inputs).logits
        mask = part.mask
        pred = np.argmax(logits, axis=-1)
        correct += int(np.sum((pred == part.targets) & mask))
        total += int(mask.sum())
    if total == 0:
        raise ArgumentError("evaluation set has no supervised positions")
    return correct / total


def fq_from_accuracy(acc: float) -> float:
    return 1.0 - acc


def forget_quality(params, forget_eval: Batch) -> float:
    """``1 - accuracy`` on the forget evaluation split; higher means more forgotten."""
    return fq_from_accuracy(accuracy(params, forget_eval))


def utility_accuracy(params, retain_eval: Batch) -> float:
    return accuracy(params, retain_eval)


def finetune_accuracy(params, task_eval: Batch) -> float:
    return accuracy(params, task_eval)


@dataclass
class Trajectory:
    """Per-epoch FQ/FA records; entry 0 is the evaluation before any fine-tuning."""

    fq: list = field(default_factory=list)
    fa: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.fq) != len(self.fa):
            raise ArgumentError("fq and fa must have equal length")
        for v in list(self.fq) + list(self.fa):
            if not 0.0 <= v <= 1.0:
                raise ArgumentError(f"trajectory value {v} outside [0, 1]")

    def append(self, fq, fa):
        self.fq.append(fq)
        self.fa.append(fa)

    @property
    def epochs(self) -> int:
        """Number of post-fine-tuning evaluations ``E``."""
        return max(len(self.fq) - 1, 0)

    def to_dict(self):
        return {"fq": list(self.fq), "fa": list(self.fa)}


def milestone_epochs(total_epochs: int):
    """1-based first-quartile, median and final epochs: ``ceil(E/4), ceil(E/2), E``."""
    if total_epochs < 1:
        raise ArgumentError("need at least one fine-tuning epoch")
    e = total_epochs
    return math.ceil(e / 4), math.ceil(e / 2), e


def robust_accuracy(traj) -> float:
    """Mean FQ over the quartile, median and final fine-tuning epochs.

    ``traj`` is a :class:`Trajectory` (index 0 = before fine-tuning) or a
    plain sequence of post-epoch FQ values for epochs ``1..E``.
    """
    if isinstance(traj, Trajectory):
        post = traj.fq[1:]
    else:
        post = list(traj)
    if not post:
        raise ArgumentError("empty trajectory")
    vals = [post[i - 1] for i in milestone_epochs(len(post))]
    # clamp away the last-bit rounding of the sum so a mean never leaves its range
    return min(max(sum(vals) / 3.0, min(vals)), max(vals))
