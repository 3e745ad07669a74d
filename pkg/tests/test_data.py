import numpy as np
import pytest

from rbsdelab.chain import build_chain
from rbsdelab.data import (NO_FLOOR, CostFunctions, DeterministicTau, HittingTau, affine_driver, assemble,
                           lower_barrier_from_phi, markov_driver, payoff, probe_driver, resolve_tau, tau_from_config)
from rbsdelab.errors import ConfigurationError, DataError
from rbsdelab.model import SmoothFunction, parametric_model


def zero_g(t, x, i, u, z, r):
    return np.zeros(len(x))


def test_markov_driver_collapses_without_jumps_of_y():
    model = parametric_model(d=1, k=2, T=1.0, x0=[0.0], regime_rates=[[0, 0.5], [0.5, 0]])
    g, lip, mono = affine_driver(2, const=1.5, own=-0.2, u=[0.1, 0.3])
    cost = CostFunctions(g_tilde=g, Psi=lambda x, i: x[:, 0], lipschitz=lip)
    y = 2.0
    got = markov_driver(cost, model, 0.0, [1.0], 0, y, [0.0], [], [0.0, 0.0])
    assert got == pytest.approx(1.5 - 0.2 * y + 0.4 * y, abs=1e-15)


def test_markov_driver_switch_term():
    model = parametric_model(d=1, k=2, T=1.0, x0=[0.0], regime_rates=[[0, 0.5], [0.5, 0]])
    cost = CostFunctions(g_tilde=zero_g, Psi=lambda x, i: x[:, 0])
    assert markov_driver(cost, model, 0.0, [0.0], 0, 0.0, [0.0], [], [0.0, 2.0]) == pytest.approx(-1.0)
    # the own-regime entry of wtilde is ignored
    assert markov_driver(cost, model, 0.0, [0.0], 0, 0.0, [0.0], [], [7.0, 2.0]) == pytest.approx(-1.0)


def test_markov_driver_jump_aggregate():
    model = parametric_model(d=1, k=1, T=1.0, x0=[0.0], jumps=[{"y": [1.0], "mass": 1.0, "intensity": 3.0}])
    cost = CostFunctions(g_tilde=lambda t, x, i, u, z, r: r, Psi=lambda x, i: x[:, 0], lipschitz=1.0)
    assert markov_driver(cost, model, 0.0, [0.0], 0, 0.0, [0.0], [2.0], [0.0]) == pytest.approx(6.0)


def test_markov_driver_rejects_nonfinite_inputs():
    model = parametric_model(d=1, k=1, T=1.0, x0=[0.0])
    cost = CostFunctions(g_tilde=zero_g, Psi=lambda x, i: x[:, 0])
    with pytest.raises(DataError, match="'z'"):
        markov_driver(cost, model, 0.0, [0.0], 0, 0.0, [np.nan], [], [0.0])


def test_cost_functions_validation():
    with pytest.raises(ConfigurationError):
        CostFunctions(g_tilde=zero_g)
    with pytest.raises(ConfigurationError):
        CostFunctions(Psi=lambda x, i: x[:, 0])
    with pytest.raises(ConfigurationError):
        CostFunctions(g_tilde=zero_g, Psi=lambda x, i: x[:, 0], lipschitz=np.inf)


def test_lower_barrier_coordinate_without_floor():
    model = parametric_model(d=1, k=2, T=1.0, x0=[0.0], drift={"const": [0.4, -0.7]}, dispersion={"const": 0.3})
    L = lower_barrier_from_phi(SmoothFunction.coordinate(0), NO_FLOOR, model)
    x = np.array([[-1.0], [0.5], [2.0]])
    np.testing.assert_array_equal(L(0.0, x, 0), x[:, 0])
    np.testing.assert_allclose(L.a(0.0, x, 0), 0.4)
    np.testing.assert_allclose(L.alpha(0.0, x, 0), 0.0)
    np.testing.assert_allclose(L.a(0.0, x, 1), -0.7)
    np.testing.assert_allclose(L.alpha(0.0, x, 1), 0.7)


def test_lower_barrier_constant_below_floor():
    model = parametric_model(d=1, k=1, T=1.0, x0=[0.0], drift={"const": -1.0})
    L = lower_barrier_from_phi(SmoothFunction.constant(3.0), 5.0, model)
    x = np.linspace(-2, 2, 5)[:, None]
    np.testing.assert_array_equal(L(0.0, x, 0), 5.0)
    np.testing.assert_array_equal(L.a(0.0, x, 0), 0.0)
    np.testing.assert_array_equal(L.alpha(0.0, x, 0), 0.0)


def test_lower_barrier_square_in_pure_diffusion():
    b, s = -0.8, 0.5
    model = parametric_model(d=1, k=1, T=1.0, x0=[1.0], drift={"linear": b}, dispersion={"linear": s})
    L = lower_barrier_from_phi(SmoothFunction.coordinate_squared(0), 0.0, model)
    x = np.array([[0.5], [1.0], [3.0]])
    gen = 2 * x[:, 0] * (b * x[:, 0]) + (s * x[:, 0]) ** 2
    np.testing.assert_allclose(L.a(0.0, x, 0), gen, rtol=1e-14)
    np.testing.assert_allclose(L.alpha(0.0, x, 0), np.maximum(-gen, 0.0), rtol=1e-14)


def test_lower_barrier_needs_derivatives():
    model = parametric_model(d=1, k=1, T=1.0, x0=[0.0])
    bare = SmoothFunction(value=lambda t, x, i: x[:, 0], dt=None, grad=None, hess=None)
    with pytest.raises(ConfigurationError, match="missing"):
        lower_barrier_from_phi(bare, 0.0, model)
    with pytest.raises(ConfigurationError):
        lower_barrier_from_phi(SmoothFunction.coordinate(0), -np.inf, model)


@pytest.fixture(scope="module")
def chain():
    model = parametric_model(d=1, k=2, T=1.0, x0=[0.0], dispersion={"const": 0.3}, regime_rates=[[0, 0.5], [0.5, 0]])
    return build_chain(model, 20, (-2.0, 2.0), 21)


def const_obstacle(c):
    return lambda t, x, i: np.full(len(x), float(c))


def test_assemble_plain_bsde(chain):
    cost = CostFunctions(g_tilde=zero_g, Psi=lambda x, i: x[:, 0])
    data = assemble("BSDE", cost, chain.model, chain=chain)
    assert data.lower is None and data.upper is None and data.stop_mask is None
    np.testing.assert_array_equal(data.terminal, chain.state_x)
    assert data.checks["lipschitz_probe"]["status"] == "PASS"


def test_assemble_rejects_crossed_obstacles(chain):
    cost = CostFunctions(g_tilde=zero_g, Psi=lambda x, i: np.full(len(x), -0.5), ell=const_obstacle(0.0),
                         h=const_obstacle(-1.0))
    with pytest.raises(DataError, match="ell <= h violated") as info:
        assemble("R2BSDE", cost, chain.model, chain=chain)
    assert info.value.witnesses[0]["m"] == 0


def test_assemble_checks_terminal_order(chain):
    cost = CostFunctions(g_tilde=zero_g, Psi=lambda x, i: np.zeros(len(x)), ell=const_obstacle(1.0))
    with pytest.raises(DataError, match="Psi"):
        assemble("RBSDE", cost, chain.model, chain=chain)


def test_assemble_configuration_errors(chain):
    cost = CostFunctions(g_tilde=zero_g, Psi=lambda x, i: x[:, 0])
    with pytest.raises(ConfigurationError, match="lower obstacle"):
        assemble("RBSDE", cost, chain.model, chain=chain)
    with pytest.raises(ConfigurationError, match="unknown problem kind"):
        assemble("FBSDE", cost, chain.model, chain=chain)
    with pytest.raises(ConfigurationError, match="no stopping time"):
        assemble("BSDE", cost, chain.model, DeterministicTau(0.5), chain=chain)


def test_lipschitz_probe_catches_understatement(chain):
    g, lip, _ = affine_driver(2, own=2.0)
    cost = CostFunctions(g_tilde=g, Psi=lambda x, i: x[:, 0], lipschitz=1.0)
    with pytest.raises(DataError, match="Lipschitz"):
        probe_driver(cost, chain.model, chain, n_probes=200)
    ok = probe_driver(cost.replace(lipschitz=lip), chain.model, chain, n_probes=200)
    assert ok["worst_ratio"] <= 1.0 + 1e-12


def test_monotone_probe(chain):
    g, lip, mono = affine_driver(2, r=-0.5)
    assert not mono
    cost = CostFunctions(g_tilde=g, Psi=lambda x, i: x[:, 0], lipschitz=lip, monotone_in_r=True)
    with pytest.raises(DataError, match="nondecreasing"):
        probe_driver(cost, chain.model, chain, n_probes=200)


def test_resolve_tau_kinds(chain):
    M = chain.M
    full = resolve_tau(None, chain)
    assert full[M].all() and not full[:M].any()
    det = resolve_tau(DeterministicTau(0.5), chain)
    assert not det[: M // 2].any() and det[M // 2:].all()
    with pytest.raises(ConfigurationError, match="time grid"):
        resolve_tau(DeterministicTau(0.33), chain)
    hit = resolve_tau(HittingTau.below(-1.0), chain)
    np.testing.assert_array_equal(hit[0], chain.state_x <= -1.0)
    assert hit[M].all()
    with pytest.raises(ConfigurationError):
        resolve_tau("soon", chain)


def test_tau_and_payoff_declarations():
    assert tau_from_config(None) is None
    assert tau_from_config({"time": 0.25}) == DeterministicTau(0.25)
    assert tau_from_config({"hit_above": 2}).description == "x >= 2"
    with pytest.raises(ConfigurationError):
        tau_from_config({"after": 1})
    x = np.array([[90.0], [110.0]])
    np.testing.assert_array_equal(payoff({"type": "put", "strike": 100})(x), [10.0, 0.0])
    np.testing.assert_array_equal(payoff({"type": "call", "strike": 100, "shift": 1})(x), [1.0, 11.0])
    np.testing.assert_array_equal(payoff({"type": "floor", "floor": 100})(x), [100.0, 110.0])
    np.testing.assert_array_equal(payoff({"type": "linear", "slope": 0.5, "intercept": 1})(x), [46.0, 56.0])
    with pytest.raises(ConfigurationError):
        payoff({"type": "digital"})
