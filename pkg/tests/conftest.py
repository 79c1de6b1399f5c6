import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spinecoal.model import geo1, load_model, sym2

MODELS = Path(__file__).resolve().parent.parent / "models"

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def sym2_model():
    return sym2()


@pytest.fixture(scope="session")
def geo1_model():
    return geo1()


@pytest.fixture(scope="session")
def mix2_model():
    return load_model((MODELS / "MIX2.json").read_text())


def binomial_z(count, n, p):
    return (count - n * p) / np.sqrt(n * p * (1 - p))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the lines are repeated in the terminal summary."""
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
