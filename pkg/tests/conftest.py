import numpy as np
import pytest
from hypothesis import settings

from sympca.cli import gen_matrix

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_symmetric(rng, d):
    M = rng.standard_normal((d, d))
    return (M + M.T) / 2.0


@pytest.fixture(scope="session")
def gaussian10():
    return gen_matrix(10, 0, "gaussian")
