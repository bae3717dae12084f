"""Attacks on an unlearned model: unrelated downstream fine-tuning and relearning.

Both attacks are fine-tuning runs that record forget quality every epoch;
the report compares FQ before the attack with FQ at the final epoch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .batches import Batch
from .errors import ArgumentError, FormatError
from .invariance import Environment
from .metrics import Trajectory, robust_accuracy
from .models import ParameterVector
from .numcore import RngStream
from .trainer import RunRecord, TrainConfig, run_finetune

KINDS = ("downstream", "relearn")


@dataclass
class AttackReport:
    kind: str
    start_id: str
    dataset: str
    trajectory: Trajectory
    rows: list = field(default_factory=list, repr=False)
    status: str = "ok"
    reference: "AttackReport | None" = field(default=None, repr=False)
    params: ParameterVector | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown attack kind {self.kind!r}")
        if not self.trajectory.fq:
            raise ArgumentError("attack trajectory is empty")

    @property
    def fq_before(self) -> float:
        return self.trajectory.fq[0]

    @property
    def fq_after(self) -> float:
        return self.trajectory.fq[-1]

    @property
    def drop(self) -> float:
        return self.fq_before - self.fq_after

    @property
    def ra(self):
        """Robust accuracy, or ``None`` when no fine-tuning epoch ran."""
        if self.trajectory.epochs == 0:
            return None
        return robust_accuracy(self.trajectory)

    @property
    def fa_final(self) -> float:
        return self.trajectory.fa[-1]

    def summary(self) -> dict:
        return {"kind": self.kind, "start_id": self.start_id, "dataset": self.dataset,
                "status": self.status, "epochs": self.trajectory.epochs,
                "fq_before": self.fq_before, "fq_after": self.fq_after, "fq_drop": self.drop,
                "ra": self.ra, "fa_final": self.fa_final,
                "trajectory": self.trajectory.to_dict()}

    def to_text(self) -> str:
        """Serialise as indented JSON; the reference run, if any, is nested."""
        doc = self.summary()
        if self.reference is not None:
            doc["reference"] = self.reference.summary()
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AttackReport":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"attack report is not valid JSON: {exc.msg}", exc.pos) from None
        return cls._from_doc(doc)

    @classmethod
    def _from_doc(cls, doc) -> "AttackReport":
        try:
            traj = Trajectory(list(doc["trajectory"]["fq"]), list(doc["trajectory"]["fa"]))
            rep = cls(doc["kind"], doc["start_id"], doc["dataset"], traj,
                      status=doc.get("status", "ok"))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"attack report misses field {exc}") from None
        if "reference" in doc:
            rep.reference = cls._from_doc(doc["reference"])
        return rep


def _report(kind, start_id, dataset, rec: RunRecord) -> AttackReport:
    return AttackReport(kind, start_id, dataset, rec.trajectory, rows=rec.rows,
                        status=rec.status, params=rec.params)


def downstream_attack(unlearned: ParameterVector, task: Environment, config: TrainConfig,
                      task_eval: Batch, forget_eval: Batch, original: ParameterVector | None = None,
                      forget_domain: str = "forget", start_id: str = "unlearned",
                      run_id: str = "attack", out_dir=None) -> AttackReport:
    """Fine-tune the unlearned model on an unrelated task until FA converges.

    When ``original`` is given, the same fine-tune (same data order) is run
    from it and attached as ``report.reference``: the curve that the
    unlearned model's FA is read against.
    """
    if task.role != "attack":
        raise ArgumentError(f"environment {task.name!r} has role {task.role!r}, expected 'attack'")
    if task.name == forget_domain:
        raise ArgumentError("a downstream attack must not fine-tune on the forget domain")
    stream = f"attack/{task.name}"
    rec = run_finetune(unlearned, task.data, task_eval, config, forget_eval, run_id=run_id,
                       out_dir=out_dir, phase="attack", stream=stream)
    rep = _report("downstream", start_id, task.name, rec)
    if original is not None:
        ref = run_finetune(original, task.data, task_eval, config, forget_eval,
                           run_id=run_id + "/original", phase="attack_reference", stream=stream)
        rep.reference = _report("downstream", "original", task.name, ref)
    return rep


def relearn_sample(forget_train: Batch, k: int, seed: int) -> Batch:
    """``k`` distinct forget examples drawn from the seed's ``relearn`` stream."""
    if k < 0:
        raise ArgumentError("k must be >= 0")
    if k > len(forget_train):
        raise ArgumentError(f"k={k} exceeds the {len(forget_train)} available forget examples")
    gen = RngStream(seed, "relearn").generator()
    idx = np.sort(gen.choice(len(forget_train), size=k, replace=False))
    return forget_train.take(idx)


def relearning_attack(unlearned: ParameterVector, forget_train: Batch, k: int, epochs: int,
                      config: TrainConfig, forget_eval: Batch, start_id: str = "unlearned",
                      run_id: str = "relearn") -> AttackReport:
    """Fine-tune on ``k`` sampled forget examples for exactly ``epochs`` epochs.

    FA in the trajectory is accuracy on the forget evaluation split, so it
    is ``1 - FQ`` at every epoch.
    """
    if epochs < 0:
        raise ArgumentError("epochs must be >= 0")
    sample = relearn_sample(forget_train, k, config.seed)
    cfg = replace(config, max_epochs=epochs)
    rec = run_finetune(unlearned, sample, forget_eval, cfg, forget_eval, run_id=run_id,
                       phase="relearn", stream="relearn/order", until_converged=False)
    return _report("relearn", start_id, "forget", rec)
