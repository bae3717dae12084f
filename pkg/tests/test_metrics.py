import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilulab.batches import IGNORE, Batch
from ilulab.errors import ArgumentError
from ilulab.metrics import (Trajectory, accuracy, forget_quality, fq_from_accuracy,
                            milestone_epochs, robust_accuracy, utility_accuracy)
from ilulab.models import ModelConfig, ParameterVector, init_model
from ilulab.numcore import RngStream

unit = st.floats(0.0, 1.0, allow_nan=False)


def constant_classifier(cls, classes=3):
    cfg = ModelConfig("mlp", 2, 1, 0, classes=classes)
    bias = np.zeros(classes)
    bias[cls] = 1.0
    return ParameterVector.from_tensors(cfg, {"out.w": np.zeros((2, classes)), "out.b": bias})


@pytest.mark.parametrize("acc, fq", [(1.0, 0.0), (0.32, 0.68), (0.64, 0.36)])
def test_fq_from_accuracy(acc, fq):
    assert fq_from_accuracy(acc) == pytest.approx(fq, abs=1e-15)


@settings(max_examples=200)
@given(unit)
def test_fq_plus_accuracy_is_one(acc):
    assert fq_from_accuracy(acc) + acc == 1.0


def test_fq_complements_model_accuracy(lm, lm_config, gen):
    from conftest import random_lm_batch
    b = random_lm_batch(lm_config, gen, n=20)
    assert forget_quality(lm, b) + accuracy(lm, b) == 1.0


def test_accuracy_counts_supervised_positions_only():
    p = constant_classifier(1)
    b = Batch(np.zeros((4, 2)), np.array([1, 1, 0, 2]))
    assert accuracy(p, b) == 0.5
    assert utility_accuracy(p, Batch(np.zeros((3, 2)), np.array([1, 1, 1]))) == 1.0


def test_accuracy_chunking_is_invisible(lm, lm_config, gen):
    from conftest import random_lm_batch
    b = random_lm_batch(lm_config, gen, n=25)
    assert accuracy(lm, b, chunk=4) == accuracy(lm, b, chunk=256)


def test_chance_level_accuracy():
    # targets drawn uniformly and independently of the model: accuracy ~ Bin(n, 1/V)/n
    cfg = ModelConfig("tinylm", 16, 8, 1, heads=2, context=12)
    p = init_model(cfg, RngStream(0))
    gen = np.random.default_rng(8)
    inputs = gen.integers(0, 16, size=(400, 12))
    targets = gen.integers(0, 16, size=(400, 12))
    n = targets.size
    acc = accuracy(p, Batch(inputs, targets))
    sigma = math.sqrt((1 / 16) * (15 / 16) / n)
    assert abs(acc - 1 / 16) <= 3 * sigma


def test_empty_sets_rejected(lm):
    empty = Batch(np.zeros((0, 6), dtype=np.int64), np.zeros((0, 6), dtype=np.int64))
    with pytest.raises(ArgumentError):
        accuracy(lm, empty)
    with pytest.raises(ArgumentError):
        forget_quality(lm, Batch(np.ones((2, 6), dtype=np.int64),
                                 np.full((2, 6), IGNORE, dtype=np.int64)))


def test_ra_worked_example():
    fq = (0.7, 0.6, 0.5, 0.5, 0.4, 0.4, 0.3, 0.3)
    assert milestone_epochs(8) == (2, 4, 8)
    assert robust_accuracy(fq) == pytest.approx((0.6 + 0.5 + 0.3) / 3, abs=1e-15)
    assert abs(robust_accuracy(fq) - 0.466667) <= 1e-6
    assert abs(robust_accuracy(Trajectory([0.9] + list(fq), [0.1] * 9)) - 1.4 / 3) <= 1e-9


@pytest.mark.parametrize("e", [1, 2, 3, 5, 17])
def test_ra_constant(e):
    assert robust_accuracy([0.68] * e) == pytest.approx(0.68, abs=1e-15)


def test_ra_single_epoch():
    assert milestone_epochs(1) == (1, 1, 1)
    assert robust_accuracy([0.5]) == 0.5


@pytest.mark.parametrize("e, ms", [(2, (1, 1, 2)), (3, (1, 2, 3)), (4, (1, 2, 4)),
                                   (5, (2, 3, 5)), (10, (3, 5, 10))])
def test_milestones(e, ms):
    assert milestone_epochs(e) == ms


def test_ra_errors():
    with pytest.raises(ArgumentError):
        robust_accuracy([])
    with pytest.raises(ArgumentError):
        robust_accuracy(Trajectory([0.5], [0.5]))
    with pytest.raises(ArgumentError):
        milestone_epochs(0)


def test_ra_bounds_on_random_trajectories():
    gen = np.random.default_rng(2024)
    for _ in range(1000):
        fq = gen.random(int(gen.integers(1, 30))).tolist()
        ra = robust_accuracy(fq)
        assert min(fq) <= ra <= max(fq)


@settings(max_examples=200)
@given(st.lists(unit, min_size=1, max_size=40), st.data())
def test_ra_ignores_non_milestone_entries(fq, data):
    ms = set(milestone_epochs(len(fq)))
    changed = [v if i + 1 in ms else data.draw(unit) for i, v in enumerate(fq)]
    assert robust_accuracy(changed) == robust_accuracy(fq)
    assert min(fq) - 1e-15 <= robust_accuracy(fq) <= max(fq) + 1e-15


def test_trajectory_validation():
    with pytest.raises(ArgumentError):
        Trajectory([0.1, 0.2], [0.3])
    with pytest.raises(ArgumentError):
        Trajectory([1.2], [0.3])
    t = Trajectory()
    t.append(0.2, 0.9)
    assert t.epochs == 0 and t.to_dict() == {"fq": [0.2], "fa": [0.9]}
