from __future__ import annotations

import numpy as np
import pytest

from rpfnet.models import MisreportSearchConfig, NetworkConfig, OutputHead, SolverConfig
from rpfnet.services.problem import ProblemInstance


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running reproduction experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def random_instance(seed: int, n: int = 2, m: int = 2, mask: bool = False,
                    demand_low: float = 0.1, budget: float | None = None) -> ProblemInstance:
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.1, 1.0, size=(n, m))
    x = rng.uniform(demand_low, 1.0, size=(n, m))
    if mask:
        x = x * (rng.random(size=(n, m)) < 0.5)
    b = np.full(m, n / 2.0 if budget is None else budget)
    return ProblemInstance(v, x, b, np.ones(n))


@pytest.fixture
def fig1():
    """Agent 1 gains by under-reporting its second value under PF."""
    return ProblemInstance(values=[[1.0, 0.5], [1.0, 0.25]], demands=np.ones((2, 2)),
                           budgets=np.ones(2), weights=np.ones(2))


@pytest.fixture
def symmetric():
    return ProblemInstance(values=np.ones((2, 2)), demands=np.ones((2, 2)),
                           budgets=np.ones(2), weights=np.ones(2))


@pytest.fixture
def tight_solver():
    return SolverConfig(tolerance=1e-10, max_iterations=300)


@pytest.fixture
def tiny_network():
    return NetworkConfig(hidden_width=4, hidden_layers=1, head=OutputHead.SOFTPLUS, seed=3)


@pytest.fixture
def quick_search():
    return MisreportSearchConfig(steps=3, restarts=1, step_size=0.05)
