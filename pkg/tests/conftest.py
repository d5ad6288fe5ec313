import numpy as np
import pytest

from toruslab.geometry import sample_manifold
from toruslab.leaflab import optimize_moment
from toruslab.scenario import load_scenario

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ex1():
    return load_scenario("example1")


@pytest.fixture(scope="session")
def ex2():
    return load_scenario("example2")


@pytest.fixture(scope="session")
def ex1_points(ex1):
    return sample_manifold(ex1.manifold, 100, np.random.default_rng(11), 2.0)


@pytest.fixture(scope="session")
def ex2_points(ex2):
    return sample_manifold(ex2.manifold, 100, np.random.default_rng(12), 2.0)


@pytest.fixture(scope="session")
def ex1_critical(ex1):
    rng = np.random.default_rng(5)
    args = (ex1.manifold, ex1.alpha, ex1.action)
    return (
        optimize_moment(*args, "max", restarts=16, rng=rng),
        optimize_moment(*args, "min", restarts=16, rng=rng),
    )
