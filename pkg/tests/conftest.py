import numpy as np
import pytest
from hypothesis import settings

from mcot.measures import Marginal1D

settings.register_profile("mcot", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("mcot")


@pytest.fixture
def bundled():
    """Densities 3x^2 and 2 - 2y on [0, 1]."""
    return Marginal1D.poly([0.0, 0.0, 3.0]), Marginal1D.poly([2.0, -2.0])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config._acceptance_lines

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
