import numpy as np
import pytest

from collabdm import kernel


@pytest.fixture
def float64():
    """Run the test body with float64 as the working precision."""
    previous = kernel.default_dtype()
    kernel.set_default_dtype(np.float64)
    yield
    kernel.set_default_dtype(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import CRITERIA
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
