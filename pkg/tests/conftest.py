"""Shared fixtures and the ``slow`` marker (enabled with ``--runslow``)."""
import pytest

from core.config import RunConfig, load_run_config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance check")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def config() -> RunConfig:
    """Desk profile shrunk for unit tests."""
    return load_run_config(profile="desk", overrides=[
        "policy.d_embed=8",
        "policy.n_heads=2",
        "policy.d_ffn=8",
        "mlp.hidden=8",
        "mlp.n_hidden_layers=1",
        "mlp.horizon=4",
        "train.n_max=5",
        "train.episode_length=6",
        "train.minibatch=4",
        "train.iterations=4",
        "train.buffer_capacity=64",
        "train.checkpoint_every=2",
        "train.log_every=1",
    ])


@pytest.fixture
def robot_config(config) -> RunConfig:
    return config.model_copy(update={"policy": config.policy.model_copy(update={"task": "robot"}),
                                     "mlp": config.mlp.model_copy(update={"task": "robot"})})
