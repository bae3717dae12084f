import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from conftest import random_lm_batch
from ilulab.batches import Batch, supervised_rows
from ilulab.errors import ArgumentError
from ilulab.invariance import (Environment, ilu_loss, invariance_penalty,
                               penalty_logit_gradient, w_gradient)
from ilulab.models import ModelConfig, ParameterVector, forward, init_model
from ilulab.numcore import RngStream, finite_difference_gradient, kernels, relative_error
from ilulab.objectives import RandomDirection, UnlearnSpec, retain_loss, unlearn_loss
from ilulab.trainer import OptState, TrainConfig, optimizer_step


def linear_model(bias):
    """Two-class linear model whose logits equal ``bias`` for any input."""
    cfg = ModelConfig("mlp", 1, 1, 0, classes=len(bias))
    return ParameterVector.from_tensors(cfg, {"out.w": np.zeros((1, len(bias))),
                                              "out.b": np.asarray(bias, dtype=float)})


def one_example(y=0):
    return Batch(np.zeros((1, 1)), np.array([y]))


def w_loss(z, y, w):
    return float(kernels.ce_rows(w * z, y, False)[0].mean())


def test_w_gradient_closed_form_and_fd():
    g = w_gradient(linear_model([1.0, 0.0]), one_example(0))
    assert g == pytest.approx(-np.exp(-1) / (1 + np.exp(-1)), abs=1e-15)
    assert g == pytest.approx(-0.268941, abs=1e-6)
    # independent oracle: central difference of the loss in the logit scale w
    z, y = np.array([[1.0, 0.0]]), np.array([0])
    fd = finite_difference_gradient(lambda w: w_loss(z, y, w[0]), [1.0], h=1e-5)[0]
    assert g == pytest.approx(fd, abs=1e-9)


def test_w_gradient_zero_logits():
    assert w_gradient(linear_model([0.0, 0.0, 0.0]), one_example(1)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.floats(-100, 100),
       st.integers(0, 2))
def test_w_gradient_shift_invariant(z, shift, y):
    a = w_gradient(linear_model(z), one_example(y))
    b = w_gradient(linear_model([v + shift for v in z]), one_example(y))
    assert abs(a - b) <= 1e-12 * max(1.0, abs(shift))


def test_penalty_logit_gradient_closed_form():
    g, dz = penalty_logit_gradient(linear_model([1.0, 0.0]), one_example(0))
    assert g == pytest.approx(-0.268941, abs=1e-6)
    assert_allclose(dz[0], [-0.072329, 0.072329], atol=1e-6)
    # oracle: finite differences of g in z
    fd = finite_difference_gradient(
        lambda z: float(kernels.ce_rows(z[None, :], np.array([0]), True)[2][0]), [1.0, 0.0],
        h=1e-6)
    assert_allclose(dz[0], fd, atol=1e-9)


def test_penalty_zero_logits_gives_zero_penalty_gradient():
    p = linear_model([0.0, 0.0])
    g, dz = penalty_logit_gradient(p, one_example(0))
    assert g == 0.0
    assert_allclose(dz[0], [-0.5, 0.5], atol=1e-15)
    total, grad, _ = invariance_penalty(p, 2.0, [one_example(0)])
    assert total == 0.0
    assert_array_equal(grad.flat, 0.0)


def test_penalty_gradient_fd_tinylm(lm, lm_config, gen):
    b = random_lm_batch(lm_config, gen)
    lam = 1.7
    analytic = invariance_penalty(lm, lam, [b])[1].flat
    numeric = finite_difference_gradient(
        lambda v: lam * w_gradient(lm.with_flat(v), b) ** 2, lm.flat)
    assert relative_error(analytic, numeric) < 1e-4


def test_penalty_split_estimator_fd(lm, lm_config, gen):
    b = random_lm_batch(lm_config, gen, n=4)
    analytic = invariance_penalty(lm, 1.0, [b], estimator="split")[1].flat

    def f(v):
        q = lm.with_flat(v)
        h1, h2 = b.split()
        return w_gradient(q, h1) * w_gradient(q, h2)

    assert relative_error(analytic, finite_difference_gradient(f, lm.flat)) < 1e-4


def test_penalty_errors(lm, lm_config, gen):
    b = random_lm_batch(lm_config, gen)
    with pytest.raises(ArgumentError):
        invariance_penalty(lm, -1.0, [b])
    with pytest.raises(ArgumentError):
        invariance_penalty(lm, 1.0, [b], estimator="median")
    empty = Batch(np.zeros((0, 6), dtype=np.int64), np.zeros((0, 6), dtype=np.int64))
    with pytest.raises(ArgumentError):
        w_gradient(lm, empty)


def test_penalty_additive_and_total(lm, lm_config, gen):
    a, b = random_lm_batch(lm_config, gen), random_lm_batch(lm_config, gen)
    lam = 0.8
    ta, _, ra = invariance_penalty(lm, lam, [a])
    tb, _, rb = invariance_penalty(lm, lam, [b])
    tab, _, rab = invariance_penalty(lm, lam, [a, b])
    assert abs(tab - (ta + tb)) <= 1e-12
    assert abs(rab.total - lam * sum(g * g for g in rab.g)) <= 1e-12
    assert tab >= 0.0


def _spec(method, ref, u):
    return UnlearnSpec(method=method, gamma=1.0, beta=0.5, c=2.0, alpha=1.0, rmu_layer=0,
                       reference=ref, direction=u)


@pytest.mark.parametrize("method", ["GA", "NPO", "RMU"])
def test_lambda_zero_equals_unlearn_loss(lm, lm_ref, lm_config, gen, method):
    fb, rb, eb = (random_lm_batch(lm_config, gen) for _ in range(3))
    spec = _spec(method, lm_ref, RandomDirection.draw(6, RngStream(0)))
    base = unlearn_loss(lm, spec, fb, rb)
    total, grad, _ = ilu_loss(lm, spec, 0.0, [Environment("T1", eb)], fb, rb, [eb])
    assert total == base.value
    assert_array_equal(grad.flat, base.grad.flat)


def test_single_env_equals_multi_path_with_one_env(lm, lm_ref, lm_config, gen):
    fb, rb, eb = (random_lm_batch(lm_config, gen) for _ in range(3))
    spec = _spec("NPO", lm_ref, None)
    one = ilu_loss(lm, spec, 2.0, [Environment("T1", eb)], fb, rb, [eb])
    again = ilu_loss(lm, spec, 2.0, [Environment("T1", eb, batch_size=16)], fb, rb, [eb])
    assert one.value == again.value
    assert_array_equal(one.grad.flat, again.grad.flat)


def test_ilu_total_arithmetic(lm, lm_ref, lm_config, gen):
    fb, rb, eb = (random_lm_batch(lm_config, gen) for _ in range(3))
    spec = _spec("GA", lm_ref, None)
    res = ilu_loss(lm, spec, 2.0, ["T1"], fb, rb, [eb])
    g = w_gradient(lm, eb)
    assert res.value == pytest.approx(unlearn_loss(lm, spec, fb, rb).value + 2.0 * g * g,
                                      abs=1e-12)


def test_ilu_arithmetic_example():
    # loss 1.0 from the unlearning term, one environment with g = 0.5, lambda = 2
    assert 1.0 + 2.0 * 0.5 ** 2 == 1.5


@pytest.mark.parametrize("method", ["GA", "NPO", "RMU"])
def test_ilu_fd(lm, lm_ref, lm_config, gen, method):
    fb, rb, e1, e2 = (random_lm_batch(lm_config, gen) for _ in range(4))
    spec = _spec(method, lm_ref, RandomDirection.draw(6, RngStream(1)))
    envs = [Environment("A", e1), Environment("B", e2)]
    fn = lambda p: ilu_loss(p, spec, 3.0, envs, fb, rb, [e1, e2])
    numeric = finite_difference_gradient(lambda v: fn(lm.with_flat(v)).value, lm.flat)
    assert relative_error(fn(lm).grad.flat, numeric) < 1e-4


def test_ilu_errors(lm, lm_ref, lm_config, gen):
    fb = random_lm_batch(lm_config, gen)
    spec = _spec("GA", lm_ref, None)
    with pytest.raises(ArgumentError):
        ilu_loss(lm, spec, 1.0, [], fb, fb, [])
    with pytest.raises(ArgumentError):
        ilu_loss(lm, spec, -1.0, ["a"], fb, fb, [fb])
    with pytest.raises(ArgumentError):
        ilu_loss(lm, spec, 1.0, ["a", "a"], fb, fb, [fb, fb])
    with pytest.raises(ArgumentError):
        ilu_loss(lm, spec, 1.0, ["a"], fb, fb, [fb, fb])
    with pytest.raises(ArgumentError):
        Environment("x", fb, role="teacher")


def test_stationary_model_has_vanishing_g():
    # logistic regression trained to its optimum on non-separable data: the logit
    # scale is one direction of parameter space, so dL/dw = <grad, theta> = 0 there
    gen = np.random.default_rng(0)
    x = gen.normal(size=(40, 3))
    y = (x[:, 0] + gen.normal(size=40) > 0).astype(np.int64)
    batch = Batch(x, y)
    cfg = ModelConfig("mlp", 3, 1, 0, classes=2)
    p = init_model(cfg, RngStream(0))
    before = abs(w_gradient(p, batch))
    state, tc = OptState(), TrainConfig(lr=0.05)
    for _ in range(3000):
        p, state = optimizer_step(p, retain_loss(p, batch).grad, state, tc)
    assert np.linalg.norm(retain_loss(p, batch).grad.flat) < 1e-6
    assert abs(w_gradient(p, batch)) < 1e-3 < before
