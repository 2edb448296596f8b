import pytest
import torch

from depthdiff.config import load_config

TINY_OVERRIDES = [
    "unet=tiny",
    "scene.image_size=16",
    "scene.min_primitives=2",
    "scene.max_primitives=4",
    "schedule.num_train_timesteps=50",
    "schedule.num_inference_steps=4",
    "schedule.ensemble_runs=2",
    "train.steps=6",
    "train.batch_size=2",
    "train.n_samples=6",
    "train.log_every=2",
    "train.checkpoint_every=3",
    "eval.n_samples=2",
]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def seed():
    """Seed the global generator for tests that draw ad-hoc inputs."""
    torch.manual_seed(42)
    yield


@pytest.fixture
def tiny_config():
    """A model and dataset small enough to train in a few seconds on CPU."""
    return load_config(overrides=TINY_OVERRIDES)


@pytest.fixture
def make_config():
    """Tiny config with extra `key=value` overrides."""

    def make(*overrides):
        return load_config(overrides=TINY_OVERRIDES + list(overrides))

    return make
