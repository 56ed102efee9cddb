import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qregret.linalg import pauli
from qregret.model import make_model

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

P = pauli()
SX, SY, SZ, SM = P["x"], P["y"], P["z"], P["minus"]
GROUND = np.diag([1.0, 0.0]).astype(complex)
EXCITED = np.diag([0.0, 1.0]).astype(complex)


def random_density(rng, d, rank=None):
    rank = d if rank is None else rank
    g = rng.normal(size=(d, rank)) + 1j * rng.normal(size=(d, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_hermitian(rng, d):
    g = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return 0.5 * (g + g.conj().T)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def decay_pair():
    """Driven decaying qubit under homodyne, mismatched initial state and drive."""
    a = np.sqrt(2.0) * SM
    true = make_model(EXCITED, a, "gaussian", hamiltonian=0.5 * SX, label="true")
    nominal = make_model(np.diag([0.8, 0.2]), a, "gaussian", hamiltonian=0.65 * SX, label="nominal")
    return true, nominal


@pytest.fixture
def counting_pair():
    true = make_model(EXCITED, SM, "poissonian", hamiltonian=0.5 * SX, label="true")
    nominal = make_model(np.diag([0.6, 0.4]), np.sqrt(1.5) * SM, "poissonian", hamiltonian=0.5 * SX,
                         label="nominal")
    return true, nominal


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
