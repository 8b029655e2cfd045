import numpy as np
import pytest

# acceptance verdict lines, echoed in the terminal summary so they survive output capture
VERDICTS = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
