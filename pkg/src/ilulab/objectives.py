"""Unlearning objectives: retain cross-entropy, GA, NPO, RMU and their sum.

Every loss returns its value together with the exact parameter gradient,
assembled through :meth:`ilulab.models.Tape.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .batches import Batch, supervised_rows
from .errors import ArgumentError, NumericError
from .models import GradAccumulator, ParameterVector, Tape
from .numcore import RngStream, kernels

METHODS = ("GA", "NPO", "RMU")


@dataclass
class Loss:
    """A scalar objective with its gradient; unpacks as ``value, grad``."""

    value: float
    grad: ParameterVector
    parts: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.value
        yield self.grad


@dataclass(frozen=True)
class RandomDirection:
    vector: np.ndarray
    seed: int

    @classmethod
    def draw(cls, dim: int, rng: RngStream) -> "RandomDirection":
        # uniform [0, 1) then normalised, as in the reference RMU code
        v = rng.generator().random(dim)
        return cls(v / np.linalg.norm(v), rng.seed)


@dataclass
class UnlearnSpec:
    """Method selector and hyperparameters of the unlearning objective.

    ``gamma`` weights the retain cross-entropy for GA/NPO; RMU instead uses
    its activation-matching retain term weighted by ``alpha``. ``reference``
    holds the frozen model (NPO reference, RMU frozen copy).
    """

    method: str = "NPO"
    gamma: float = 1.0
    beta: float = 0.1
    c: float = 6.5
    alpha: float = 1.0
    rmu_layer: int = 0
    reference: ParameterVector | None = None
    direction: RandomDirection | None = None

    def validate(self, config=None):
        if self.method not in METHODS:
            raise ArgumentError(f"unknown unlearning method {self.method!r}")
        if self.gamma < 0:
            raise ArgumentError("gamma must be >= 0")
        if self.method == "NPO" and not self.beta > 0:
            raise ArgumentError("NPO needs beta > 0")
        if self.method == "RMU":
            if not self.c > 0:
                raise ArgumentError("RMU needs c > 0")
            if self.alpha < 0:
                raise ArgumentError("alpha must be >= 0")
            if self.direction is None:
                raise ArgumentError("RMU needs a random direction")
            if config is not None and not 0 <= self.rmu_layer < config.layers:
                raise ArgumentError(f"rmu_layer {self.rmu_layer} out of range")
        if self.method in ("NPO", "RMU") and self.reference is None:
            raise ArgumentError(f"{self.method} needs a frozen reference model")


def _check_finite(value, what):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}")


def _ce_parts(params, batch):
    tape = Tape(params, batch.inputs)
    z, y, index = supervised_rows(tape.logits, batch)
    nll, dz, _, _ = kernels.ce_rows(z, y, False)
    return tape, nll, dz, index


def _accumulate(params, into):
    return into if into is not None else GradAccumulator(params.config)


def retain_loss(params, batch: Batch, scale=1.0, into=None) -> Loss:
    """Mean cross-entropy over supervised positions (``scale`` multiplies both outputs)."""
    tape, nll, dz, index = _ce_parts(params, batch)
    n = nll.size
    value = float(nll.sum() / n)
    _check_finite(value, "retain loss")
    g = np.zeros_like(tape.logits)
    g[index] = dz * (scale / n)
    buf = _accumulate(params, into)
    tape.backward(g, into=buf)
    return Loss(scale * value, None if into is not None else buf.result(), {"mean_nll": value})


def ga_forget_loss(params, batch: Batch, into=None) -> Loss:
    """Negated cross-entropy on the forget batch."""
    return retain_loss(params, batch, scale=-1.0, into=into)


def sequence_logprob(logits, batch: Batch):
    """Summed log-probability of supervised targets per sequence/example."""
    z, y, index = supervised_rows(logits, batch)
    nll, dz, _, _ = kernels.ce_rows(z, y, False)
    seq = index[0]
    lp = -np.bincount(seq, weights=nll, minlength=len(batch))
    return lp, dz, index


def npo_forget_loss(params, ref_params, batch: Batch, beta, into=None) -> Loss:
    """``(2/beta) * mean softplus(beta * (log pi - log pi_ref))`` over sequences."""
    if not beta > 0:
        raise ArgumentError(f"NPO needs beta > 0, got {beta}")
    if not params.same_layout(ref_params):
        raise ArgumentError("reference model has a different configuration")
    tape = Tape(params, batch.inputs)
    lp, dz, index = sequence_logprob(tape.logits, batch)
    ref_logits = Tape(ref_params, batch.inputs).logits
    lp_ref, _, _ = sequence_logprob(ref_logits, batch)
    has = np.bincount(index[0], minlength=len(batch)) > 0
    r = (lp - lp_ref)[has]
    n = r.size
    value = float((2.0 / beta) * np.logaddexp(0.0, beta * r).sum() / n)
    _check_finite(value, "NPO loss")
    weight = np.zeros(len(batch))
    # d loss / d log pi_i = 2 * sigmoid(beta * r_i) / n
    weight[has] = 2.0 * np.exp(-np.logaddexp(0.0, -beta * r)) / n
    g = np.zeros_like(tape.logits)
    g[index] = -dz * weight[index[0]][:, None]
    buf = _accumulate(params, into)
    tape.backward(g, into=buf)
    return Loss(value, None if into is not None else buf.result(),
                {"log_ratio": float(r.mean())})


def _positions(batch: Batch, config):
    """Rows whose hidden state RMU acts on: supervised positions / all examples."""
    if config.family == "tinylm":
        return np.nonzero(batch.mask)
    return (np.arange(len(batch)),)


def rmu_loss(params, frozen_params, forget_batch: Batch, retain_batch: Batch,
             u: RandomDirection, c, alpha, layer, into=None) -> Loss:
    """Steer forget activations at ``layer`` toward ``c*u``; pin retain activations.

    ``mean_f ||h - c u||^2 / d + alpha * mean_r ||h - h_frozen||^2 / d`` with
    means over forget/retain positions and ``d`` the hidden width.
    """
    cfg = params.config
    if not 0 <= layer < cfg.layers:
        raise ArgumentError(f"layer {layer} out of range [0, {cfg.layers})")
    if not c > 0:
        raise ArgumentError("c must be > 0")
    if not params.same_layout(frozen_params):
        raise ArgumentError("frozen model has a different configuration")
    d = cfg.hidden
    target = c * np.asarray(u.vector if isinstance(u, RandomDirection) else u)
    if target.shape != (d,):
        raise ArgumentError(f"direction must have length {d}")
    buf = _accumulate(params, into)

    tape_f = Tape(params, forget_batch.inputs, upto=layer)
    idx_f = _positions(forget_batch, cfg)
    if len(idx_f[0]) == 0:
        raise ArgumentError("empty forget batch")
    diff_f = tape_f.trace[layer][idx_f] - target
    nf = diff_f.shape[0]
    forget_term = float((diff_f ** 2).sum() / (d * nf))
    tg = np.zeros_like(tape_f.trace[layer])
    tg[idx_f] = 2.0 * diff_f / (d * nf)
    tape_f.backward(None, {layer: tg}, into=buf)

    retain_term = 0.0
    if alpha > 0:
        tape_r = Tape(params, retain_batch.inputs, upto=layer)
        frozen_h = Tape(frozen_params, retain_batch.inputs, upto=layer).trace[layer]
        idx_r = _positions(retain_batch, cfg)
        if len(idx_r[0]) == 0:
            raise ArgumentError("empty retain batch")
        diff_r = tape_r.trace[layer][idx_r] - frozen_h[idx_r]
        nr = diff_r.shape[0]
        retain_term = float((diff_r ** 2).sum() / (d * nr))
        tg = np.zeros_like(tape_r.trace[layer])
        tg[idx_r] = 2.0 * alpha * diff_r / (d * nr)
        tape_r.backward(None, {layer: tg}, into=buf)
    value = forget_term + alpha * retain_term
    _check_finite(value, "RMU loss")
    return Loss(value, None if into is not None else buf.result(),
                {"forget": forget_term, "retain": retain_term})


def combine(forget_value, retain_value, gamma):
    """The regularised unlearning objective ``forget + gamma * retain``."""
    if gamma == 0:
        return forget_value
    return forget_value + gamma * retain_value


def unlearn_loss(params, spec: UnlearnSpec, forget_batch: Batch, retain_batch: Batch,
                 into=None) -> Loss:
    """``forget_loss + gamma * retain_loss`` (RMU carries its own retain term)."""
    spec.validate(params.config)
    buf = _accumulate(params, into)
    if spec.method == "RMU":
        res = rmu_loss(params, spec.reference, forget_batch, retain_batch, spec.direction,
                       spec.c, spec.alpha, spec.rmu_layer, into=buf)
        parts = {"forget": res.parts["forget"], "retain": res.parts["retain"]}
        value = res.value
    else:
        if spec.method == "GA":
            f = ga_forget_loss(params, forget_batch, into=buf)
        else:
            f = npo_forget_loss(params, spec.reference, forget_batch, spec.beta, into=buf)
        parts = {"forget": f.value, "retain": 0.0}
        if spec.gamma > 0:
            r = retain_loss(params, retain_batch, scale=spec.gamma, into=buf)
            parts["retain"] = r.parts["mean_nll"]
        value = combine(f.value, parts["retain"], spec.gamma)
    return Loss(value, None if into is not None else buf.result(), parts)
