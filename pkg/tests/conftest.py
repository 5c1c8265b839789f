import numpy as np
import pytest

from artifact.cvp_core import klein_gordon_kernel, lattice_vacuum
from artifact.dynamics import fit_flow, scattering_setup
from artifact.linfield import assemble_delta

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def kg_vacuum():
    """Exact Klein-Gordon lattice vacuum on 12 x 6 sites with its linearized operator."""
    k, mu, s = lattice_vacuum(klein_gordon_kernel(0.7, 0.5), 12, 6)
    return k, mu, s, assemble_delta(k, mu, s)


@pytest.fixture(scope="session")
def scenario():
    """Weak cubic coupling on a 14 x 3 lattice, scattering window 3..11, order 2."""
    k = klein_gordon_kernel(0.7, 0.5, lam=0.8, window=(4.0, 9.0))
    return scattering_setup(k, 14, 3, 3, 11, order=2)


@pytest.fixture(scope="session")
def linear_scenario():
    k = klein_gordon_kernel(0.7, 0.5, lam=0.0, window=(4.0, 9.0))
    return scattering_setup(k, 14, 3, 3, 11, order=2)


@pytest.fixture(scope="session")
def scenario_fit(scenario):
    return fit_flow(scenario, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
