import numpy as np
import pytest
from scipy.stats import ortho_group


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_orthogonal(d, seed):
    if d == 1:
        return np.array([[1.0]])
    return ortho_group.rvs(d, random_state=seed)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
