import numpy as np
import pytest

from exprsynth.data import synthesize_dataset


@pytest.fixture(scope="session")
def synthetic():
    """The default 20-subject synthetic dataset (about 10 s to render)."""
    return synthesize_dataset(20, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
