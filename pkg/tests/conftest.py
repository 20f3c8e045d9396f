import logging
import textwrap

import numpy as np
import pytest

from fldefend.aggregation import AggregatorKind, AggregatorSpec
from fldefend.data import AttackSpec, Dataset, FlipPair, TaskSpec
from fldefend.nn import ModelParams, TrainConfig
from fldefend.sim import SimConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end simulations")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def scalar_model(value: float) -> ModelParams:
    """One weight, one bias: flattens to [value, 0]."""
    return ModelParams([np.array([[value]])], [np.zeros(1)])


def vector_model(values) -> ModelParams:
    values = np.asarray(values, dtype=np.float64)
    return ModelParams([values[None, :-1]], [values[-1:]])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_task():
    return TaskSpec(num_classes=3, num_features=4, samples_per_class=40, test_samples_per_class=20, center_scale=3.0, seed=5)


@pytest.fixture
def tiny_config(small_task):
    return SimConfig(
        num_clients=8,
        clients_per_round=4,
        rounds=3,
        malicious_rate=0.25,
        hidden_units=(8,),
        task=small_task,
        train=TrainConfig(learning_rate=0.05, local_epochs=1, batch_size=16),
        attack=AttackSpec(mode="static", pairs=(FlipPair(1, 3),)),
        aggregator=AggregatorSpec(kind=AggregatorKind.DEFEND),
        seed=11,
    )


@pytest.fixture
def identity_val():
    """Three one-hot clusters; a W=I, b=0 linear model classifies them perfectly."""
    features = np.repeat(np.eye(3), 4, axis=0) + 0.01 * np.tile([[1.0, -1.0, 0.5]], (12, 1))
    labels = np.repeat([1, 2, 3], 4)
    return Dataset(features, labels)


TINY_YAML = textwrap.dedent(
    """\
    seed: 3
    federation:
      num_clients: 10
      clients_per_round: 5
      rounds: 3
      malicious_rate: 0.3
    model:
      hidden_units: [8]
    task:
      num_classes: 3
      num_features: 4
      samples_per_class: 40
      test_samples_per_class: 20
      center_scale: 3.0
      seed: 2
    train:
      learning_rate: 0.05
      local_epochs: 1
      batch_size: 16
    attack:
      mode: static
      pairs:
        - source: 1
          target: 3
    aggregator:
      kind: defend
    """
)


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_YAML, encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def reset_package_logger():
    yield
    package = logging.getLogger("fldefend")
    for handler in list(package.handlers):
        package.removeHandler(handler)
    package.setLevel(logging.NOTSET)
