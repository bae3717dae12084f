"""IRMv1-style invariance penalty for unlearning.

A virtual scalar ``w`` multiplies every output logit. For cross-entropy the
derivative of an environment's loss with respect to ``w`` at ``w = 1`` is

    g = mean_t <softmax(z_t) - onehot(y_t), z_t>

over the environment batch's supervised positions, and the penalty is
``lambda * sum_i g_i**2``. Its parameter gradient is assembled from the
closed-form logit derivative

    dg/dz_t = (p_t - y_t) + p_t * (z_t - <p_t, z_t>)   (divided by the count)

so no second-order autodiff is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .batches import Batch, supervised_rows
from .errors import ArgumentError, NumericError
from .models import GradAccumulator, Tape
from .numcore import kernels
from .objectives import Loss, UnlearnSpec, unlearn_loss

ROLES = ("invariance", "attack", "forget", "retain")


@dataclass(frozen=True)
class Environment:
    """A named dataset in one role; ``data`` is a :class:`Batch` holding every example."""

    name: str
    data: Batch
    role: str = "invariance"
    batch_size: int = 48

    def __post_init__(self):
        if self.role not in ROLES:
            raise ArgumentError(f"unknown environment role {self.role!r}")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")


@dataclass
class PenaltyReport:
    names: list = field(default_factory=list)
    g: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    lam: float = 0.0

    @property
    def total(self) -> float:
        return self.lam * float(sum(self.penalty))

    def rows(self):
        return [{"env": n, "g": g, "penalty": p}
                for n, g, p in zip(self.names, self.g, self.penalty)]


def _w_terms(tape, batch: Batch, with_grad: bool):
    z, y, index = supervised_rows(tape.logits, batch)
    _, _, gw, dgw = kernels.ce_rows(z, y, True)
    n = gw.size
    g = float(gw.sum() / n)
    if not np.isfinite(g):
        raise NumericError("non-finite invariance gradient")
    if not with_grad:
        return g, None
    dz = np.zeros_like(tape.logits)
    dz[index] = dgw / n
    return g, dz


def w_gradient(params, env_batch: Batch) -> float:
    """``d/dw loss(w * logits)`` at ``w = 1``."""
    tape = Tape(params, env_batch.inputs)
    return _w_terms(tape, env_batch, False)[0]


def penalty_logit_gradient(params, env_batch: Batch):
    """Return ``(g, dg/dlogits)``; the array is zero at unsupervised positions."""
    tape = Tape(params, env_batch.inputs)
    return _w_terms(tape, env_batch, True)


def invariance_penalty(params, lam, env_batches, names=None, estimator="single",
                       into=None):
    """``lam * sum_i g_i**2`` with its parameter gradient and a :class:`PenaltyReport`.

    ``estimator="split"`` uses the product of the two half-batch estimates
    ``g_a * g_b`` per environment instead of the squared full-batch estimate.
    """
    if lam < 0:
        raise ArgumentError(f"lambda must be >= 0, got {lam}")
    if estimator not in ("single", "split"):
        raise ArgumentError(f"unknown estimator {estimator!r}")
    names = list(names) if names is not None else [f"env{i}" for i in range(len(env_batches))]
    report = PenaltyReport(lam=lam)
    buf = into if into is not None else GradAccumulator(params.config)
    for name, batch in zip(names, env_batches):
        if estimator == "single":
            tape = Tape(params, batch.inputs)
            g, dz = _w_terms(tape, batch, lam > 0)
            pen = g * g
            if lam > 0 and g != 0.0:
                tape.backward(2.0 * lam * g * dz, into=buf)
        else:
            half_a, half_b = batch.split()
            tape_a, tape_b = Tape(params, half_a.inputs), Tape(params, half_b.inputs)
            ga, dza = _w_terms(tape_a, half_a, lam > 0)
            gb, dzb = _w_terms(tape_b, half_b, lam > 0)
            g, pen = 0.5 * (ga + gb), ga * gb
            if lam > 0:
                tape_a.backward(lam * gb * dza, into=buf)
                tape_b.backward(lam * ga * dzb, into=buf)
        report.names.append(name)
        report.g.append(g)
        report.penalty.append(pen)
    return report.total, (buf.result() if into is None else None), report


def ilu_loss(params, spec: UnlearnSpec, lam, envs, forget_batch: Batch, retain_batch: Batch,
             env_batches, estimator="single"):
    """Unlearning objective plus ``lam * sum_i g_i**2`` over the environments.

    Returns an :class:`IluLoss` (unpacks as ``total, grad, report``). With one environment this is the
    single-dataset form of the objective.
    """
    if lam < 0:
        raise ArgumentError(f"lambda must be >= 0, got {lam}")
    envs = list(envs)
    env_batches = list(env_batches)
    if lam > 0 and not envs:
        raise ArgumentError("invariance penalty needs at least one environment")
    if len(envs) != len(env_batches):
        raise ArgumentError("one batch per environment is required")
    names = [e.name if isinstance(e, Environment) else str(e) for e in envs]
    if len(set(names)) != len(names):
        raise ArgumentError("environment names must be unique")
    buf = GradAccumulator(params.config)
    base = unlearn_loss(params, spec, forget_batch, retain_batch, into=buf)
    pen_total, _, report = invariance_penalty(params, lam, env_batches, names,
                                              estimator=estimator, into=buf)
    total = base.value + pen_total
    return IluLoss(total, buf.result(), dict(base.parts, penalty=pen_total), report)


@dataclass
class IluLoss(Loss):
    """Unpacks as ``total, grad, report``."""

    report: PenaltyReport | None = None

    def __iter__(self):
        yield self.value
        yield self.grad
        yield self.report
