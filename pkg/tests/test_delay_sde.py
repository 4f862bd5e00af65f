import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import LN2, merton_coeffs
from delayfolio.delay_sde import (
    TimeGrid,
    brownian_increments,
    constant_strategy,
    init_V,
    markov_strategy,
    quadrature_V,
    simulate_factors,
    simulate_wealth,
    write_paths_csv,
)
from delayfolio.errors import ConfigError, MissingHistoryError
from delayfolio.market_model import DelaySpec, ModelDims, PowerUtility, build_coefficients

U = PowerUtility(0.5)


def affine(**kw):
    return build_coefficients("affine", ModelDims(1, 1, 1), 0.5, kw)


def test_grid_rejects_zero_steps():
    with pytest.raises(ConfigError):
        TimeGrid(1.0, 0)


def test_delay_must_sit_on_grid():
    with pytest.raises(ConfigError, match="integer multiple"):
        TimeGrid(1.0, 10).delay_steps(DelaySpec(1.0, LN2))
    assert TimeGrid(1.0, 10).delay_steps(DelaySpec(1.0, 0.3)) == (3, 0.0)
    d, frac = TimeGrid(1.0, 10).delay_steps(DelaySpec(1.0, LN2, interpolate=True))
    assert d == 6 and frac == pytest.approx(LN2 * 10 - 6)


def test_init_V_examples():
    h = lambda y: y[:, 0]
    assert init_V(lambda s: np.zeros((np.size(s), 1)), DelaySpec(1.0, LN2), lambda y: 0 * y[:, 0]) == 0.0
    one = DelaySpec(1.0, LN2).history_fn([1.0])
    assert init_V(one, DelaySpec(1.0, LN2), h) == pytest.approx(0.5, abs=1e-7)
    two = DelaySpec(1.0, math.inf).history_fn([2.0])
    assert init_V(two, DelaySpec(1.0, math.inf), h) == pytest.approx(2.0, abs=1e-5)


def test_missing_history_raises():
    hist = (np.array([-0.1, 0.0]), np.array([1.0, 1.0]))
    with pytest.raises(MissingHistoryError):
        simulate_factors(affine(), DelaySpec(1.0, 0.5, history=hist), TimeGrid(1.0, 10), [1.0], 4, 0)


def test_deterministic_V_infinite_delay():
    c = affine()  # b = 0, sigma_F = 0, h(y) = y
    grid = TimeGrid(1.0, 200)
    f = simulate_factors(c, DelaySpec(1.0, math.inf), grid, [1.5], 2, 0, v0=0.2)
    exact = 0.2 * np.exp(-grid.times) + (1 - np.exp(-grid.times)) * 1.5
    assert np.max(np.abs(f.V[0] - exact)) < 1e-5
    assert np.all(f.Y == 1.5)


def test_deterministic_V_pointwise_is_stationary():
    grid = TimeGrid(1.0, 100)
    f = simulate_factors(affine(), DelaySpec(1.0, LN2, interpolate=True), grid, [1.0], 2, 0)
    # the trapezoid recursion's fixed point sits O(dt^2) above the exact value
    np.testing.assert_allclose(f.V[0], 0.5, atol=1e-5)
    np.testing.assert_allclose(f.Z[0], 1.0)


def test_linear_ode_converges_first_order():
    c = affine(b_y=-1.0)
    errs = []
    for K in (50, 100, 200):
        f = simulate_factors(c, DelaySpec(1.0, math.inf), TimeGrid(1.0, K), [1.0], 1, 0)
        errs.append(abs(f.Y[0, -1, 0] - math.exp(-1.0)))
    assert errs[0] / errs[1] > 1.9 and errs[1] / errs[2] > 1.9


def test_zero_strategy_grows_at_rate_r(merton):
    f = simulate_factors(merton, DelaySpec(1.0, math.inf), TimeGrid(1.0, 50), [0.0], 3, 0)
    w = simulate_wealth(f, merton, U, constant_strategy([0.0]))
    np.testing.assert_allclose(w.X[:, -1], math.exp(0.03), rtol=1e-12)
    assert math.exp(0.03) == pytest.approx(1.03045, abs=1e-5)
    np.testing.assert_allclose(w.Xtilde[:, 0], 2.0)


def test_zero_volatility_deterministic_path():
    c = build_coefficients("constant", ModelDims(1, 1, 2), 0.5, dict(r=0.02, mu=0.05, sigma=[[0.3, 0.0]]))
    f = simulate_factors(c, DelaySpec(1.0, math.inf), TimeGrid(1.0, 20), [0.0], 4, 1)
    w = simulate_wealth(f, c, U, constant_strategy([0.0]))
    assert np.ptp(w.X[:, -1]) == 0.0


def test_merton_expected_utility(merton):
    f = simulate_factors(merton, DelaySpec(1.0, math.inf), TimeGrid(1.0, 50), [0.0], 40_000, 3)
    w = simulate_wealth(f, merton, U, constant_strategy([2.5]))
    u_T = w.Xtilde[:, -1]
    se = u_T.std(ddof=1) / math.sqrt(u_T.size)
    assert abs(u_T.mean() - 2.0 * math.exp(0.04625)) < 3 * se


def test_quadrature_matches_recursion():
    c = affine(b_y=-0.5)
    delay = DelaySpec(1.0, 0.5)
    f = simulate_factors(c, delay, TimeGrid(1.0, 100), [1.0], 3, 0)
    assert np.max(np.abs(quadrature_V(f, delay, c.h) - f.V)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**63), pi=st.floats(-20, 20), sigma=st.floats(0.05, 1.0))
def test_wealth_positive(seed, pi, sigma):
    c = merton_coeffs(sigma=sigma)
    f = simulate_factors(c, DelaySpec(1.0, math.inf), TimeGrid(1.0, 20), [0.0], 64, seed)
    w = simulate_wealth(f, c, U, constant_strategy([pi]))
    assert np.all(w.X > 0)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), n=st.integers(1, 3000))
def test_increments_independent_of_workers(seed, n):
    a = brownian_increments(n, 5, 2, 0.1, seed, workers=1)
    b = brownian_increments(n, 5, 2, 0.1, seed, workers=8)
    assert np.array_equal(a, b)


def test_increments_prefix_stable():
    a = brownian_increments(2000, 4, 1, 0.1, 7)
    b = brownian_increments(600, 4, 1, 0.1, 7)
    assert np.array_equal(a[:512], b[:512])


def test_chunked_blocks_match():
    full = brownian_increments(2048, 3, 1, 0.1, 9)
    tail = brownian_increments(1024, 3, 1, 0.1, 9, first_block=2)
    assert np.array_equal(full[1024:], tail)


def test_antithetic_pairs():
    d = brownian_increments(512, 3, 1, 0.1, 1, antithetic=True)
    np.testing.assert_array_equal(d[:256], -d[256:])


def test_csv_bytes_identical_across_workers(tmp_path):
    c = build_coefficients("lq_pointwise", ModelDims(1, 1, 1), 0.5,
                           dict(alpha=[0.5, 1, 0.25], beta=[1, 0.5, 0]))
    delay = DelaySpec(1.0, LN2, interpolate=True)
    strat = markov_strategy(lambda t, y, v, z: 0.5 * y + 0.1)
    outs = []
    for w in (1, 8):
        f = simulate_factors(c, delay, TimeGrid(1.0, 20), [0.3], 1500, 11, workers=w)
        wealth = simulate_wealth(f, c, U, strat, workers=w)
        path = tmp_path / f"p{w}.csv"
        write_paths_csv(path, f, wealth, max_paths=50)
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    rows = list(csv.reader(outs[0].decode().splitlines()))
    assert rows[0] == ["t", "path_id", "Y1", "V", "Z1", "X", "Xtilde", "pi1"]
    assert len(rows) == 1 + 50 * 21
    assert float(rows[1][4]) == 0.3  # Z before time delta is the history value
