import os

import numpy as np
import pytest

from hybridbem.markov_chain import validate_generator
from hybridbem.model import (
    CUBIC_CORRECTED_GENERATOR,
    CUBIC_GENERATOR,
    FunctionModel,
    two_regime_cubic,
)

os.environ.setdefault("POT_BACKEND_DISABLE_TENSORFLOW", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_PYTORCH", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_JAX", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_CUPY", "1")

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


@pytest.fixture(scope="session")
def cubic_model():
    return two_regime_cubic()


@pytest.fixture(scope="session")
def gen_printed():
    return validate_generator(CUBIC_GENERATOR)


@pytest.fixture(scope="session")
def gen_fixed():
    return validate_generator(CUBIC_CORRECTED_GENERATOR)


@pytest.fixture(scope="session")
def one_state():
    return validate_generator([[0.0]])


def linear_drift(X):
    return -X


def zero_diffusion(X):
    return np.zeros((len(X), 1, 1))


def unit_diffusion(X):
    return np.ones((len(X), 1, 1))


def zero_drift(X):
    return np.zeros_like(X)


def minus_identity(X):
    return -np.ones((len(X), 1, 1))


@pytest.fixture
def linear_ode():
    """dX = -X dt, no noise, one regime."""
    return FunctionModel([linear_drift], [zero_diffusion], jacobians=[minus_identity], name="linear-ode")


@pytest.fixture
def brownian():
    """dX = dB, one regime."""
    return FunctionModel([zero_drift], [unit_diffusion], name="brownian")


ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
