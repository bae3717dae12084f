import numpy as np
import pytest

from ilulab.batches import IGNORE, Batch
from ilulab.datasets import Suite, SyntheticSuiteConfig
from ilulab.models import ModelConfig, init_model
from ilulab.numcore import RngStream


def random_lm_batch(config, gen, n=3, supervised=0.6):
    t = config.context
    inputs = gen.integers(0, config.input_dim, size=(n, t))
    targets = gen.integers(0, config.input_dim, size=(n, t))
    keep = gen.random((n, t)) < supervised
    keep[:, -1] = True
    targets[~keep] = IGNORE
    return Batch(inputs, targets)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture
def lm_config():
    # 688 parameters: small enough for full finite-difference sweeps
    return ModelConfig("tinylm", 10, 6, 1, heads=2, context=6)


@pytest.fixture
def lm2_config():
    return ModelConfig("tinylm", 8, 4, 2, heads=2, context=5)


@pytest.fixture
def mlp_config():
    return ModelConfig("mlp", 5, 7, 2, classes=3)


@pytest.fixture
def lm(lm_config):
    return init_model(lm_config, RngStream(0, "params"))


@pytest.fixture
def lm_ref(lm_config):
    return init_model(lm_config, RngStream(0, "reference"))


@pytest.fixture
def small_suite():
    cfg = SyntheticSuiteConfig(vocab=64, seq_len=16,
                               examples={"train": 60, "val": 10, "eval": 30}, seed=3)
    return Suite.generate(cfg)


TINY_CONFIG = """\
[experiment]
seeds = 0, 1
methods = RMU, NPO
variants = base, ilu_single, ilu_multi
multi_envs = T1, T2
eval_tasks = T1, T2
[suite]
vocab = 40
seq_len = 16
train = 80
val = 10
eval = 40
seed = 1
[model]
hidden = 8
layers = 2
heads = 2
mlp_ratio = 2
[pretrain]
steps = 40
batch_size = 16
[unlearn]
steps = 4
batch_size = 8
env_batch_single = 8
env_batch_multi = 4
[finetune]
max_epochs = 2
batch_size = 16
train_examples = 32
[relearn]
k = 10
[sweep]
lambdas = 0.1, 1.0
"""


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="session")
def tiny_bundles(tmp_path_factory):
    """Two independent full-pipeline runs of the tiny config: ``(dir_a, dir_b, status)``."""
    from ilulab.config import ExperimentConfig
    from ilulab.pipeline import run_matrix

    cfg = ExperimentConfig.from_text(TINY_CONFIG)
    dirs = [tmp_path_factory.mktemp(f"bundle_{tag}") for tag in "ab"]
    status = [run_matrix(cfg, d) for d in dirs]
    return dirs[0], dirs[1], status


# acceptance verdicts, filled by test_acceptance and echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (len(s.split()[1]), s)):
            terminalreporter.write_line(line)
