import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbsdelab.chain import (DOWN, STAY, UP, augment, build_chain, conditional_expectation, martingale_components,
                            reconstruct_increments, sample_chain_paths)
from rbsdelab.errors import ConfigurationError
from rbsdelab.model import parametric_model


def test_rows_stochastic_and_monotone(acc_chain):
    ch = acc_chain
    assert ch.probs.min() >= 0.0
    np.testing.assert_allclose(ch.probs.sum(axis=2), 1.0, atol=1e-12)
    assert ch.monotone
    assert ch.n_states == 800 and ch.M == 200
    for m in (0, 100, 199):
        P = ch.kernel(m)
        np.testing.assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(b=st.floats(-2, 2), s=st.floats(0, 1.5), f=st.floats(0, 1), lam=st.floats(0, 2), steps=st.integers(10, 40))
def test_random_models_give_stochastic_kernels(b, s, f, lam, steps):
    model = parametric_model(d=1, k=2, T=1.0, x0=[0.0], drift={"const": [b, -b]}, dispersion={"const": [s, 0.5 * s]},
                             jumps=[{"y": [0.3], "intensity": f}], regime_rates=[[0, lam], [lam, 0]])
    try:
        ch = build_chain(model, steps, (-3.0, 3.0), 31)
    except ConfigurationError as exc:
        # a coarse step must be refused with an admissible bound, and that bound must work
        assert "max admissible dt" in str(exc)
        dt_max = float(str(exc).rsplit(" ", 1)[-1])
        ch = build_chain(model, int(np.ceil(model.T / dt_max)) + 1, (-3.0, 3.0), 31)
    assert ch.probs.min() >= 0.0
    np.testing.assert_allclose(ch.probs.sum(axis=2), 1.0, atol=1e-12)
    assert np.all((ch.targets >= 0) & (ch.targets < ch.n_states))


def test_zero_model_gives_identity():
    model = parametric_model(d=1, k=2, T=1.0, x0=[0.0])
    ch = build_chain(model, 5, (-1.0, 1.0), 11)
    for m in range(5):
        np.testing.assert_array_equal(ch.kernel(m).toarray(), np.eye(ch.n_states))


def test_pure_diffusion_stencil():
    s, dt, h = 0.5, 0.01, 0.1
    model = parametric_model(d=1, k=1, T=1.0, x0=[0.0], dispersion={"const": s})
    ch = build_chain(model, 100, (-1.0, 1.0), 21, span="nearest")
    interior = 10
    p = ch.probs[0, interior]
    r = s * s * dt / h**2
    assert p[UP] == pytest.approx(r / 2, abs=1e-15)
    assert p[DOWN] == pytest.approx(r / 2, abs=1e-15)
    assert p[STAY] == pytest.approx(1 - r, abs=1e-15)
    # first two moments of the stencil
    disp = ch.disp[0, interior]
    assert np.sum(p * disp) == pytest.approx(0.0, abs=1e-15)
    assert np.sum(p * disp**2) == pytest.approx(s * s * dt, rel=1e-12)


def test_switch_probability_is_lambda_dt():
    model = parametric_model(d=1, k=2, T=1.0, x0=[0.0], dispersion={"const": 0.1}, regime_rates=[[0, 0.5], [0.3, 0]])
    ch = build_chain(model, 100, (-1.0, 1.0), 21)
    sw = ch.probs[:, :, ch.switch_slice]
    n = ch.n_nodes
    np.testing.assert_allclose(sw[:, :n, 1], 0.005, rtol=1e-12)
    np.testing.assert_allclose(sw[:, n:, 0], 0.003, rtol=1e-12)
    assert np.all(sw[:, :n, 0] == 0) and np.all(sw[:, n:, 1] == 0)


def test_nearest_span_reports_max_dt():
    model = parametric_model(d=1, k=1, T=1.0, x0=[0.0], dispersion={"const": 1.0})
    with pytest.raises(ConfigurationError, match="max admissible"):
        build_chain(model, 10, (-1.0, 1.0), 41, span="nearest")
    ch = build_chain(model, 10, (-1.0, 1.0), 41)
    assert ch.report.span.max() > 1
    assert ch.monotone


def test_multi_dimensional_lattice_not_implemented():
    model = parametric_model(d=2, k=1, T=1.0, x0=[0.0, 0.0])
    with pytest.raises(NotImplementedError):
        build_chain(model, 10, (-1.0, 1.0), 11)


def test_conditional_expectation_examples(small_chain):
    ch = small_chain
    np.testing.assert_allclose(conditional_expectation(ch, 3, np.full(ch.n_states, 2.5)), 2.5, rtol=1e-14)
    target = 17
    e = np.zeros(ch.n_states)
    e[target] = 1.0
    np.testing.assert_allclose(conditional_expectation(ch, 3, e), ch.kernel(3).toarray()[:, target], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        conditional_expectation(ch, 3, np.zeros(ch.n_states + 1))


def test_linear_values_on_pure_drift_chain():
    mu = 0.8
    model = parametric_model(d=1, k=1, T=1.0, x0=[0.0], drift={"const": mu})
    ch = build_chain(model, 50, (-2.0, 2.0), 81)
    x = ch.state_x
    e = conditional_expectation(ch, 0, x)
    interior = ~ch.report.boundary_affected[0]
    bound = ch.report.mean_residual[0][interior] * ch.dt
    assert np.all(np.abs(e - (x + mu * ch.dt))[interior] <= bound + 1e-14)


def test_martingale_components_examples(small_chain):
    ch = small_chain
    n = ch.n_nodes
    parts = martingale_components(ch, 5, np.full(ch.n_states, 3.0))
    np.testing.assert_allclose(parts.Z, 0.0, atol=1e-13)
    assert np.all(parts.Vtilde == 0) and np.all(parts.Wtilde == 0)

    u = np.concatenate([np.full(n, 1.0), np.full(n, 4.0)])
    parts = martingale_components(ch, 5, u)
    np.testing.assert_allclose(parts.Z, 0.0, atol=1e-12)
    np.testing.assert_allclose(parts.residual, 0.0, atol=1e-12)
    np.testing.assert_allclose(parts.Vtilde, 0.0, atol=1e-12)
    np.testing.assert_allclose(parts.Wtilde[:n, 1], 3.0)
    np.testing.assert_allclose(parts.Wtilde[n:, 0], -3.0)
    np.testing.assert_allclose(parts.Wtilde[:n, 0], 0.0)


def test_Z_of_identity_is_sigma():
    s = 0.4
    model = parametric_model(d=1, k=1, T=1.0, x0=[0.0], drift={"const": 0.1}, dispersion={"const": s})
    ch = build_chain(model, 100, (-2.0, 2.0), 101)
    parts = martingale_components(ch, 0, ch.state_x)
    interior = ~ch.report.boundary_affected[0]
    assert np.max(np.abs(parts.Z[interior, 0] - s)) <= ch.h
    np.testing.assert_allclose(parts.residual[interior], 0.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(0, 39))
def test_exact_decomposition(small_chain, seed, m):
    ch = small_chain
    values = np.random.default_rng(seed).normal(size=ch.n_states) * 10
    parts = martingale_components(ch, m, values)
    increments = values[ch.targets[m]] - parts.mean[:, None]
    np.testing.assert_allclose(reconstruct_increments(ch, m, parts), increments, atol=1e-12 * (1 + np.abs(values).max()))
    # every elementary martingale increment has conditional mean zero
    db = ch.db[m]
    np.testing.assert_allclose(np.sum(ch.probs[m] * db, axis=1), 0.0, atol=1e-12)


def test_consistency_report(acc_chain):
    rep = acc_chain.report.summary()
    assert rep["max_mean_residual_interior"] <= 1e-9
    # the trinomial matches a dt - (mu dt)^2: per unit time the gap is mu^2 dt
    ch = acc_chain
    mu_max = 0.03 * ch.nodes[-1]
    assert rep["max_variance_residual_interior"] <= mu_max**2 * ch.dt * (1 + 1e-9)
    assert rep["jump_probability_residual"] <= 1e-12
    assert rep["switch_probability_residual"] <= 1e-12
    assert 0 < rep["boundary_affected_fraction"] < 1
    assert acc_chain.summary()["states"] == 800


def test_augment_layers(small_chain):
    ch = small_chain
    mask = np.zeros((ch.M + 1, ch.n_states), dtype=bool)
    with pytest.raises(ConfigurationError):
        augment(ch, mask, "activation")
    mask[ch.M] = True
    mask[10:, :5] = True
    for mode in ("activation", "absorbing"):
        aug = augment(ch, mask, mode)
        assert aug.n_states == 2 * ch.n_states
        np.testing.assert_allclose(aug.probs.sum(axis=2), 1.0, atol=1e-12)
        assert aug.layer[aug.s0] == 0
    absorbing = augment(ch, mask, "absorbing")
    post = np.arange(ch.n_states, 2 * ch.n_states)
    assert np.all(absorbing.targets[:, post, STAY] == post)
    with pytest.raises(ValueError):
        augment(absorbing, np.vstack([mask, mask]), "absorbing")


def test_chain_paths_are_reproducible(small_chain):
    a, ba = sample_chain_paths(small_chain, 200, seed=3)
    b, bb = sample_chain_paths(small_chain, 200, seed=3)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ba, bb)
    assert np.all(small_chain.probs[np.arange(small_chain.M)[None, :], a[:, :-1], ba] > 0)
