"""
Shared pytest setup: flat modules on sys.path, the --runslow option and
common parameter sets.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from model_core import ModelParams  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow Monte Carlo checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def subcritical():
    """r = a + b < 4."""
    return ModelParams(a=2.0, b=1.0, N=10, M=1)


@pytest.fixture
def supercritical():
    """r = a + b = 8."""
    return ModelParams(a=6.0, b=2.0, N=10, M=1)


@pytest.fixture
def tmp_db(tmp_path):
    return tmp_path / "runs.db"
