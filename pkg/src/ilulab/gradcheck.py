"""Finite-difference agreement for every analytic gradient in the package.

Each check builds a model small enough (under 700 parameters) for a full
central-difference sweep and compares it with the hand-written backward
pass. The same routine backs the ``gradcheck`` command and the tests.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

from .batches import IGNORE, Batch, supervised_rows
from .errors import NumericError
from .invariance import Environment, ilu_loss, penalty_logit_gradient, w_gradient
from .models import ModelConfig, forward, init_model
from .numcore import RngStream, finite_difference_gradient, kernels, relative_error
from .objectives import (RandomDirection, UnlearnSpec, ga_forget_loss, npo_forget_loss,
                         retain_loss, rmu_loss)

TOLERANCE = 1e-4


@dataclass
class GradCheck:
    name: str
    rel_error: float
    n_params: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.rel_error <= TOLERANCE


def small_lm(layers=1) -> ModelConfig:
    return ModelConfig("tinylm", 10, 6, layers, heads=2, context=6)


def random_batch(config: ModelConfig, gen, n=3, supervised=0.6) -> Batch:
    """Token batch with a random supervision mask (every row keeps one target)."""
    t = config.context
    inputs = gen.integers(0, config.input_dim, size=(n, t))
    targets = gen.integers(0, config.input_dim, size=(n, t))
    keep = gen.random((n, t)) < supervised
    keep[:, -1] = True
    targets[~keep] = IGNORE
    return Batch(inputs, targets)


def _param_check(name, params, value_and_grad):
    t0 = time.perf_counter()
    analytic = value_and_grad(params).grad.flat
    numeric = finite_difference_gradient(lambda x: value_and_grad(params.with_flat(x)).value,
                                         params.flat, h=1e-5)
    return GradCheck(name, relative_error(analytic, numeric), params.size,
                     time.perf_counter() - t0)


def run_gradchecks(seed=0):
    """Return one :class:`GradCheck` per analytic gradient."""
    rng = RngStream(seed, "gradcheck")
    gen = rng.child("data").generator()
    cfg = small_lm()
    params = init_model(cfg, rng.child("params"))
    ref = init_model(cfg, rng.child("reference"))
    fb, rb = random_batch(cfg, gen), random_batch(cfg, gen)
    envs = [random_batch(cfg, gen), random_batch(cfg, gen)]
    u = RandomDirection.draw(cfg.hidden, rng.child("direction"))
    out = []

    out.append(_param_check("cross_entropy", params, lambda p: retain_loss(p, rb)))
    out.append(_param_check("ga", params, lambda p: ga_forget_loss(p, fb)))
    out.append(_param_check("npo", params, lambda p: npo_forget_loss(p, ref, fb, beta=0.5)))
    out.append(_param_check("rmu", params,
                            lambda p: rmu_loss(p, ref, fb, rb, u, c=2.0, alpha=1.5, layer=0)))

    # w_gradient: derivative of the loss along the scale of the logits
    t0 = time.perf_counter()
    z = gen.normal(size=(6, cfg.input_dim)) * 2.0
    y = gen.integers(0, cfg.input_dim, size=6)
    g_kernel = float(kernels.ce_rows(z, y, True)[2].mean())
    g_fd = finite_difference_gradient(
        lambda w: float(kernels.ce_rows(w[0] * z, y, False)[0].mean()), [1.0], h=1e-5)[0]
    out.append(GradCheck("w_gradient", relative_error(g_kernel, g_fd), z.size,
                         time.perf_counter() - t0))
    # the model-level entry point agrees with the kernel on its own logits
    b = envs[0]
    t0 = time.perf_counter()
    g_model, dz = penalty_logit_gradient(params, b)
    if abs(g_model - w_gradient(params, b)) > 1e-12:
        raise NumericError("w_gradient and penalty_logit_gradient disagree")

    def g_of_logits(flat):
        logits = flat.reshape(dz.shape)
        zz, yy, _ = supervised_rows(logits, b)
        return float(kernels.ce_rows(zz, yy, True)[2].mean())

    logits = forward(params, b.inputs)[0]
    num = finite_difference_gradient(g_of_logits, logits.ravel(), h=1e-5)
    out.append(GradCheck("penalty_logit_gradient", relative_error(dz.ravel(), num), logits.size,
                         time.perf_counter() - t0))

    env_objs = [Environment("A", envs[0]), Environment("B", envs[1])]
    for method in ("GA", "NPO", "RMU"):
        spec = UnlearnSpec(method=method, gamma=0.7, beta=0.5, c=2.0, alpha=1.5, rmu_layer=0,
                           reference=ref, direction=u)
        out.append(_param_check(f"ilu/{method}", params,
                                lambda p, s=spec: ilu_loss(p, s, 3.0, env_objs, fb, rb, envs)))
    spec = UnlearnSpec(method="NPO", gamma=0.7, beta=0.5, reference=ref)
    out.append(_param_check("ilu/NPO/split", params,
                            lambda p: ilu_loss(p, spec, 3.0, env_objs, fb, rb, envs,
                                               estimator="split")))
    return out


def format_results(results) -> str:
    lines = [f"{'gradient':<24} {'params':>7} {'rel_error':>11} {'seconds':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.n_params:>7} {r.rel_error:>11.3e} {r.seconds:>8.2f}  "
                     f"{'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
