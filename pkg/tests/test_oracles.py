"""The reference computations agree with each other before anything is compared to the solver."""

import numpy as np
import pytest

from rbsdelab.chain import build_chain

from conftest import tiny_model
from oracles import dense_kernels, dynkin_value, game_value_exhaustive


@pytest.fixture(scope="module")
def tiny_chain():
    return build_chain(tiny_model(T=2.0), 2, (90.0, 110.0), 2)


def obstacles(chain):
    x = chain.state_x
    lower = [0.5 * x + 46.0 + 0.3 * m for m in range(chain.M + 1)]
    upper = [0.5 * x + 50.0 for _ in range(chain.M + 1)]
    terminal = 0.7 * x + 28.0 + np.where(chain.state_regime == 1, 1.0, 0.0)
    return terminal, lower, upper


def test_dense_kernels_are_stochastic(tiny_chain):
    for P in dense_kernels(tiny_chain):
        assert P.min() >= 0
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-15)


def test_minmax_dp_equals_exhaustive_game(tiny_chain):
    terminal, lower, upper = obstacles(tiny_chain)
    dp = dynkin_value(tiny_chain, terminal, lower, upper)
    for start in range(tiny_chain.n_states):
        game = game_value_exhaustive(tiny_chain, terminal, lower, upper, start)
        assert dp[0, start] == pytest.approx(game, abs=1e-12)


def test_minmax_dp_without_binding_barriers_is_expectation(tiny_chain):
    terminal = tiny_chain.state_x.copy()
    far = [np.full(tiny_chain.n_states, -1e6)] * (tiny_chain.M + 1)
    high = [np.full(tiny_chain.n_states, 1e6)] * (tiny_chain.M + 1)
    dp = dynkin_value(tiny_chain, terminal, far, high)
    P0, P1 = dense_kernels(tiny_chain)
    np.testing.assert_allclose(dp[0], P0 @ (P1 @ terminal), rtol=1e-14)
