"""Optimisation loops: unlearning (baseline or invariance-regularised) and fine-tuning."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .batches import Batch
from .errors import ArgumentError, NumericError
from .invariance import Environment, ilu_loss
from .metrics import Trajectory, accuracy, forget_quality
from .models import GradAccumulator, ParameterVector, Tape, save_checkpoint
from .numcore import RngStream, kernels
from .batches import supervised_rows
from .objectives import UnlearnSpec, unlearn_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("run_id", "phase", "step_or_epoch", "loss", "fq", "fa", "utility",
                  "env", "g", "penalty")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_steps: int = 300
    max_epochs: int = 10
    accum: int = 1
    batch_size: int = 32
    conv_threshold: float = 0.01
    conv_window: int = 3
    eval_every: int = 50
    seed: int = 0

    def validate(self):
        if not self.lr > 0:
            raise ArgumentError("learning rate must be > 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.accum < 1:
            raise ArgumentError("accumulation factor must be >= 1")
        if self.conv_window < 2:
            raise ArgumentError("convergence window must be >= 2")
        if self.batch_size < 1:
            raise ArgumentError("batch size must be >= 1")
        if self.max_steps < 0 or self.max_epochs < 0:
            raise ArgumentError("step/epoch budgets must be >= 0")
        return self


@dataclass
class OptState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(params: ParameterVector, grads, state: OptState, config: TrainConfig,
                   trainable=None):
    """One SGD or AdamW update; returns ``(new_params, new_state)``.

    ``trainable`` is an optional boolean mask over the flat parameters;
    masked-out coordinates are left untouched (including weight decay).
    """
    theta = params.flat
    g = grads.flat if isinstance(grads, ParameterVector) else np.asarray(grads, dtype=np.float64)
    if g.shape != theta.shape:
        raise ArgumentError(f"gradient shape {g.shape} does not match parameters {theta.shape}")
    if trainable is not None:
        g = np.where(trainable, g, 0.0)
    if config.optimizer == "sgd":
        return params.with_flat(theta - config.lr * g), OptState(state.step + 1)
    t = state.step + 1
    m = np.zeros_like(theta) if state.m is None else state.m
    v = np.zeros_like(theta) if state.v is None else state.v
    m = config.beta1 * m + (1.0 - config.beta1) * g
    v = config.beta2 * v + (1.0 - config.beta2) * (g * g)
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    update = m_hat / (np.sqrt(v_hat) + config.eps)
    if config.weight_decay:
        decay = config.weight_decay * theta
        if trainable is not None:
            decay = np.where(trainable, decay, 0.0)
        update = update + decay
    return params.with_flat(theta - config.lr * update), OptState(t, m, v)


def converged(history, threshold=0.01, window=3) -> bool:
    """True once the last ``window`` epoch-to-epoch FA changes are all below ``threshold``.

    ``history`` holds post-epoch FA values as fractions (epoch 1 first).
    """
    h = list(history)
    if len(h) < window + 1:
        return False
    tail = h[-(window + 1):]
    return all(abs(b - a) < threshold for a, b in zip(tail, tail[1:]))


class BatchStream:
    """Endless shuffled minibatches over ``data``, reshuffled every pass."""

    def __init__(self, data: Batch, batch_size: int, rng: RngStream):
        if len(data) == 0:
            raise ArgumentError("empty dataset")
        self.data = data
        self.batch_size = min(batch_size, len(data))
        self.gen = rng.generator()
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> Batch:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.gen.permutation(len(self.data))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.data.take(idx)


@dataclass
class RunRecord:
    run_id: str
    phase: str
    config: dict
    rows: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    duration: float = 0.0
    status: str = "ok"
    message: str = ""
    params: ParameterVector | None = None
    trajectory: Trajectory | None = None

    def log(self, step, **values):
        row = {c: "" for c in METRIC_COLUMNS}
        row.update(run_id=self.run_id, phase=self.phase, step_or_epoch=step)
        row.update({k: v for k, v in values.items() if v is not None})
        self.rows.append(row)


def ce_loss(params, batch: Batch, into):
    """Mean cross-entropy with the gradient accumulated into ``into``."""
    tape = Tape(params, batch.inputs)
    z, y, index = supervised_rows(tape.logits, batch)
    nll, dz, _, _ = kernels.ce_rows(z, y, False)
    n = nll.size
    g = np.zeros_like(tape.logits)
    g[index] = dz / n
    tape.backward(g, into=into)
    return float(nll.sum() / n)


def _finite(value, what):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}")


def scope_mask(config, scope: str):
    """Boolean mask of trainable coordinates for an unlearning scope.

    ``"all"`` trains everything; ``"blocks"`` trains only transformer blocks
    (embeddings, final norm and unembedding frozen).
    """
    if scope == "all":
        return None
    if scope != "blocks":
        raise ArgumentError(f"unknown parameter scope {scope!r}")
    probe = ParameterVector(config)
    parts = [np.full(t.size, name.startswith(("blocks.", "fc")), dtype=bool)
             for name, t in probe.items()]
    return np.concatenate(parts)


def run_unlearning(base: ParameterVector, spec: UnlearnSpec, lam: float, envs, forget: Batch,
                   retain: Batch, config: TrainConfig, forget_eval: Batch | None = None,
                   retain_eval: Batch | None = None, run_id="unlearn", out_dir=None,
                   scope="all", estimator="single") -> RunRecord:
    """Minimise the unlearning objective (plus the invariance penalty when ``lam > 0``).

    ``envs`` is a list of :class:`Environment`. Batches for the forget set,
    retain set and each environment are drawn from independent streams of
    ``config.seed``, so a ``lam = 0`` run follows exactly the baseline path.
    """
    config.validate()
    envs = list(envs or [])
    if lam < 0:
        raise ArgumentError("lambda must be >= 0")
    if lam > 0 and not envs:
        raise ArgumentError("lambda > 0 requires at least one environment")
    spec.validate(base.config)
    rec = RunRecord(run_id, "unlearn", {"train": asdict(config), "lam": lam,
                                        "method": spec.method, "envs": [e.name for e in envs],
                                        "scope": scope})
    t0 = time.perf_counter()
    rng = RngStream(config.seed, "unlearn")
    f_stream = BatchStream(forget, config.batch_size, rng.child("forget"))
    r_stream = BatchStream(retain, config.batch_size, rng.child("retain"))
    e_streams = [BatchStream(e.data, e.batch_size, rng.child(f"env:{e.name}")) for e in envs]
    mask = scope_mask(base.config, scope)
    params, state = base, OptState()

    def evaluate(step, loss=None):
        fq = forget_quality(params.rounded32(), forget_eval) if forget_eval is not None else None
        ut = accuracy(params.rounded32(), retain_eval) if retain_eval is not None else None
        rec.log(step, loss=loss, fq=fq, utility=ut)

    evaluate(0)
    try:
        for step in range(1, config.max_steps + 1):
            buf = GradAccumulator(base.config)
            total = 0.0
            report = None
            for _ in range(config.accum):
                fb, rb = f_stream.next(), r_stream.next()
                if lam > 0:
                    res = ilu_loss(params, spec, lam, envs, fb, rb, [s.next() for s in e_streams],
                                   estimator=estimator)
                    report = res.report
                else:
                    res = unlearn_loss(params, spec, fb, rb)
                _finite(res.value, "unlearning loss")
                total += res.value
                buf.flat += res.grad.flat
            if config.accum > 1:
                buf.flat /= config.accum
            params, state = optimizer_step(params, buf.result(), state, config, mask)
            if not np.all(np.isfinite(params.flat)):
                raise NumericError("parameters became non-finite")
            if report is not None and (step % config.eval_every == 0 or step == config.max_steps):
                for row in report.rows():
                    rec.log(step, loss=total / config.accum, env=row["env"], g=row["g"],
                            penalty=lam * row["penalty"])
            if step % config.eval_every == 0 or step == config.max_steps:
                evaluate(step, total / config.accum)
    except NumericError as exc:
        rec.status, rec.message = "numeric_abort", str(exc)
        log.error("%s: aborted: %s", run_id, exc)
    rec.params = params.rounded32()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "unlearned.ckpt")
        save_checkpoint(params, path)
        rec.checkpoints["final"] = path
    rec.duration = time.perf_counter() - t0
    return rec


def run_finetune(start: ParameterVector, train: Batch, task_eval: Batch, config: TrainConfig,
                 forget_eval: Batch | None = None, run_id="finetune", out_dir=None,
                 phase="finetune", stream="finetune", until_converged=True) -> RunRecord:
    """Fine-tune on ``train`` epoch by epoch until FA converges or ``max_epochs``.

    With ``until_converged=False`` exactly ``max_epochs`` epochs run. An
    empty ``train`` batch leaves the parameters untouched (every epoch is
    still evaluated). Epoch 0 is the evaluation of ``start``. Evaluations use the float32
    values that per-epoch checkpoints store, so reloading a checkpoint
    reproduces the logged numbers.
    """
    config.validate()
    rec = RunRecord(run_id, phase, {"train": asdict(config)})
    rec.trajectory = Trajectory()
    t0 = time.perf_counter()
    rng = RngStream(config.seed, stream)
    gen = rng.generator()
    params, state = start, OptState()
    fa_hist = []

    def evaluate(epoch, loss=None):
        p32 = params.rounded32()
        fa = accuracy(p32, task_eval)
        fq = forget_quality(p32, forget_eval) if forget_eval is not None else 0.0
        rec.trajectory.append(fq, fa)
        rec.log(epoch, loss=loss, fq=fq if forget_eval is not None else None, fa=fa)
        if out_dir is not None:
            path = os.path.join(out_dir, f"epoch{epoch:03d}.ckpt")
            save_checkpoint(params, path)
            rec.checkpoints[epoch] = path
        return fa

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    evaluate(0)
    n = len(train)
    bs = min(config.batch_size, n)
    try:
        for epoch in range(1, config.max_epochs + 1):
            if n == 0:
                fa_hist.append(evaluate(epoch))
                continue
            order = gen.permutation(n)
            losses = []
            nsteps = n // (bs * config.accum)
            if nsteps == 0:
                nsteps = 1
            for s in range(nsteps):
                buf = GradAccumulator(start.config)
                for a in range(config.accum):
                    lo = ((s * config.accum + a) * bs) % n
                    idx = order[lo:lo + bs]
                    if idx.size == 0:
                        continue
                    losses.append(ce_loss(params, train.take(idx), buf))
                if config.accum > 1:
                    buf.flat /= config.accum
                params, state = optimizer_step(params, buf.result(), state, config)
            loss = float(np.mean(losses))
            _finite(loss, "fine-tuning loss")
            if not np.all(np.isfinite(params.flat)):
                raise NumericError("parameters became non-finite")
            fa_hist.append(evaluate(epoch, loss))
            if until_converged and converged(fa_hist, config.conv_threshold, config.conv_window):
                break
    except NumericError as exc:
        rec.status, rec.message = "numeric_abort", str(exc)
        log.error("%s: aborted: %s", run_id, exc)
    rec.params = params.rounded32()
    rec.duration = time.perf_counter() - t0
    return rec


def run_pretrain(init: ParameterVector, mixture: Batch, config: TrainConfig,
                 evals: dict | None = None, run_id="pretrain") -> RunRecord:
    """Plain cross-entropy training for ``max_steps`` steps on a data mixture."""
    config.validate()
    rec = RunRecord(run_id, "pretrain", {"train": asdict(config)})
    t0 = time.perf_counter()
    stream = BatchStream(mixture, config.batch_size, RngStream(config.seed, "pretrain"))
    params, state = init, OptState()
    for step in range(1, config.max_steps + 1):
        buf = GradAccumulator(init.config)
        loss = 0.0
        for _ in range(config.accum):
            loss += ce_loss(params, stream.next(), buf)
        if config.accum > 1:
            buf.flat /= config.accum
        _finite(loss, "pretraining loss")
        params, state = optimizer_step(params, buf.result(), state, config)
        if evals and (step % config.eval_every == 0 or step == config.max_steps):
            for name, b in evals.items():
                rec.log(step, loss=loss / config.accum, env=name, fa=accuracy(params, b))
    rec.params = params.rounded32()
    rec.duration = time.perf_counter() - t0
    return rec
