import math

import numpy as np
import pytest

from bmsflow.model import ModelParams, default_remainder_model, zero_remainder_model
from bmsflow.orbit import solve_heteroclinic


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def rem(params):
    return default_remainder_model(params)


@pytest.fixture(scope="session")
def zero_rem(params):
    return zero_remainder_model(params)


@pytest.fixture(scope="session")
def solution(params, rem):
    return solve_heteroclinic(0.25, -200, 200, params, rem)


def fit_rate(values):
    """Geometric rate of a sequence from a log-linear least-squares fit."""
    y = np.log(np.abs(np.asarray(values, dtype=float)))
    slope = np.polyfit(np.arange(len(y)), y, 1)[0]
    return math.exp(slope)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
