import numpy as np
import pytest

from qmed.gsem import DagParams, GsemModel
from qmed.marginals import MarginalModel

ACCEPTANCE_LINES = []


def std_normal():
    return MarginalModel("normal", [0.0], 1.0)


@pytest.fixture
def example2_model():
    """S, M standard normal, Y ~ Exp(1), dag (1, 1, 0)."""
    return GsemModel(std_normal(), std_normal(), MarginalModel("exponential", [0.0]), DagParams(1.0, 1.0, 0.0))


@pytest.fixture
def acceptance():
    """Returns ``record(k, ok, detail)``; prints and keeps one line per criterion."""

    def record(k, ok, detail):
        line = f"ACCEPTANCE {k} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
