import numpy as np
import pytest

from rbsdelab.chain import build_chain
from rbsdelab.data import CostFunctions, acceptance_cost, affine_driver, assemble
from rbsdelab.model import acceptance_model, parametric_model
from rbsdelab.solver import solve

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acc_model():
    return acceptance_model()


@pytest.fixture(scope="session")
def acc_chain(acc_model):
    return build_chain(acc_model, 200, (20.0, 300.0), 400)


@pytest.fixture(scope="session")
def acc_data(acc_model, acc_chain):
    return assemble("R2BSDE", acceptance_cost(acc_model), acc_model, chain=acc_chain)


@pytest.fixture(scope="session")
def acc_solution(acc_chain, acc_data):
    return solve(acc_chain, acc_data)


@pytest.fixture(scope="session")
def small_model():
    """Acceptance coefficients on a coarse mesh, for fast structural tests."""
    return acceptance_model()


@pytest.fixture(scope="session")
def small_chain(small_model):
    return build_chain(small_model, 40, (20.0, 300.0), 60)


def constant_cost(model, value=5.0, driver_const=0.0):
    g, lip, mono = affine_driver(model.k, const=driver_const)
    c = float(value)
    return CostFunctions(
        g_tilde=g, Psi=lambda x, i: np.full(len(x), c),
        ell=lambda t, x, i: np.full(len(x), c), h=lambda t, x, i: np.full(len(x), c),
        lipschitz=lip, monotone_in_r=mono,
    )


def tiny_model(drift=(2.0, -2.0), sigma=10.0, rate=0.2, T=3.0):
    return parametric_model(d=1, k=2, T=T, x0=[90.0], drift={"const": list(drift)},
                            dispersion={"const": sigma}, regime_rates=[[0.0, rate], [rate, 0.0]])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
