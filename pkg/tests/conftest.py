import sys

import numpy as np
import pytest

from npos.data import SyntheticSpec, gen_synthetic
from npos.synth import SynthesisConfig
from npos.trainer import TrainConfig


def small_config(**overrides):
    """A few-epoch configuration that still exercises synthesis."""
    synth = dict(k=20, m=10, p=50)
    synth.update({k: overrides.pop(k) for k in list(overrides) if k in synth or k == "sigma2"})
    base = dict(epochs=4, warmup_epochs=2, queue_capacity=60, batch_size=64, synthesis=SynthesisConfig(**synth))
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_data():
    return gen_synthetic(SyntheticSpec(kind="gaussian-mixture", n_per_class=100, d=2, n_classes=3, seed=3))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
