import numpy as np
import pytest

from consistyle.config import RunConfig

from .helpers import CRITERIA


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    """B=3, n=10: the cheapest config that still has every window non-empty."""
    return RunConfig(batch=3, steps=10).validate()


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
