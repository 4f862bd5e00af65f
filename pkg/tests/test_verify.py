import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import merton_coeffs, pointwise_params
from delayfolio.closed_form import pointwise_pi, pointwise_solution
from delayfolio.delay_sde import TimeGrid, constant_strategy, markov_strategy, simulate_factors, simulate_wealth
from delayfolio.market_model import DelaySpec, ModelDims, PowerUtility, build_coefficients
from delayfolio.verify import (
    adjoint_product,
    analytic_argmax,
    argmax_check,
    check_indices,
    eval_hamiltonian,
    martingale_test,
    perturbed_strategies,
    supermartingale_test,
    utility_dominance_test,
)

U = PowerUtility(0.5)
INF = DelaySpec(1.0, math.inf)


def test_hamiltonian_examples():
    c = merton_coeffs()
    assert eval_hamiltonian(U, c, [0.0], 0.0, None, [[0.0]], 2.0, 1.0, [[0.0]])[0] == pytest.approx(0.5 * 2 * 0.03)
    c0 = merton_coeffs(r=0.0, mu=0.05)
    assert eval_hamiltonian(U, c0, [0.0], 0.0, None, [[1.0]], 2.0, 1.0, [[0.0]])[0] == pytest.approx(0.04)


def two_asset(seed):
    rng = np.random.default_rng(seed)
    sigma = rng.normal(size=(2, 3)) * 0.3
    mu = 0.02 + rng.normal(size=2) * 0.05
    return build_coefficients("constant", ModelDims(2, 1, 3), 0.5, dict(r=0.02, mu=mu, sigma=sigma)), rng


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_hamiltonian_concave_at_argmax(seed):
    c, rng = two_asset(seed)
    p, q = 1.3, rng.normal(size=(1, 3)) * 0.2
    star = analytic_argmax(U, c, [0.0], 0.0, None, p, q)
    h_star = eval_hamiltonian(U, c, [0.0], 0.0, None, star, 1.0, p, q)[0]
    d = rng.normal(size=(100, 2))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    for di in d:
        assert eval_hamiltonian(U, c, [0.0], 0.0, None, star + 0.01 * di, 1.0, p, q)[0] < h_star


def test_argmax_merton_and_zero_excess():
    rep = argmax_check(U, merton_coeffs(), [0.0], 0.0, None, 1.0, [[0.0]])
    assert rep.passed and rep.details["analytic"][0] == pytest.approx(2.5)
    rep = argmax_check(U, merton_coeffs(mu=0.03), [0.0], 0.0, None, 1.0, [[0.0]])
    assert rep.passed and abs(rep.details["numeric"][0]) < 1e-6


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_argmax_two_assets(seed):
    c, rng = two_asset(seed)
    rep = argmax_check(U, c, [0.0], 0.0, None, 0.8, rng.normal(size=(1, 3)) * 0.2, tol=1e-5)
    assert rep.passed, rep.details


def test_check_indices():
    assert check_indices(100) == [20, 40, 60, 80, 100]
    assert check_indices(3, 5) == [1, 2, 3]


def test_trivial_martingale_is_constant():
    c = merton_coeffs(r=0.0, mu=0.0)
    f = simulate_factors(c, INF, TimeGrid(1.0, 10), [0.0], 100, 0)
    w = simulate_wealth(f, c, U, constant_strategy([0.0]))
    g = adjoint_product(w.Xtilde, np.zeros((100, 11)))
    assert np.all(g == 2.0)
    rep = martingale_test(g, 2.0, f)
    assert rep.passed and rep.statistic == 0.0


@pytest.fixture(scope="module")
def pointwise_run():
    p = pointwise_params()
    sol = pointwise_solution(p)
    c = p.coefficients()
    f = simulate_factors(c, p.delay(), TimeGrid(1.0, 50), [0.0], 20_000, 21)
    ph = np.stack([sol.p_hat(f.t[k], f.Y[:, k, 0], f.V[:, k]) for k in range(51)], axis=1)
    opt = markov_strategy(lambda t, y, v, z: pointwise_pi(sol, c, t, y, v, z).total[:, None])
    return p, sol, c, f, ph, opt


def test_martingale_pointwise_closed_form(pointwise_run):
    p, sol, c, f, ph, opt = pointwise_run
    w = simulate_wealth(f, c, U, opt)
    rep = martingale_test(adjoint_product(w.Xtilde, ph), 2.0 * math.exp(sol.p_hat(0, 0.0, 0.0)), f)
    assert rep.passed, rep.details
    assert rep.n_paths == 20_000 and rep.seed == 21 and rep.dt == pytest.approx(0.02)


def test_doubled_qhat_negative_control(pointwise_run):
    p, sol, c, f, ph, opt = pointwise_run
    bad = markov_strategy(lambda t, y, v, z: (lambda s: s.merton + 2 * s.hedging)(
        pointwise_pi(sol, c, t, y, v, z))[:, None])
    w = simulate_wealth(f, c, U, bad)
    rep = martingale_test(adjoint_product(w.Xtilde, ph), 2.0 * math.exp(sol.p_hat(0, 0.0, 0.0)), f)
    assert not rep.passed and rep.statistic > 3


def test_supermartingale_cases(pointwise_run):
    p, sol, c, f, ph, opt = pointwise_run
    w = simulate_wealth(f, c, U, opt)
    rep = supermartingale_test(adjoint_product(w.Xtilde, ph))
    assert rep.passed and max(abs(z) for z in rep.details["z_scores"]) < 3


def test_supermartingale_shift_decreases():
    # sigma = 1 makes the drift of the shifted product -0.03 per unit time, well above noise
    c = merton_coeffs(mu=0.28, sigma=1.0)
    f = simulate_factors(c, INF, TimeGrid(1.0, 50), [0.0], 50_000, 13)
    p_hat = 0.04625 * (1 - f.t)[None, :].repeat(f.n_paths, axis=0)
    w = simulate_wealth(f, c, U, constant_strategy([0.5 + 0.5]))
    g = adjoint_product(w.Xtilde, p_hat)
    rep = supermartingale_test(g)
    assert rep.passed
    assert all(d < 0 for d in rep.details["mean_differences"])
    total = g[:, -1] - g[:, 0]
    assert total.mean() / (total.std(ddof=1) / math.sqrt(total.size)) < -3


def test_supermartingale_zero_strategy_with_risk_premium():
    c = merton_coeffs()
    f = simulate_factors(c, INF, TimeGrid(1.0, 50), [0.0], 2000, 3)
    w = simulate_wealth(f, c, U, constant_strategy([0.0]))
    t = f.t
    p_hat = 0.04625 * (1 - t)[None, :].repeat(2000, axis=0)
    rep = supermartingale_test(adjoint_product(w.Xtilde, p_hat))
    assert rep.passed
    assert all(d < 0 for d in rep.details["mean_differences"])


def test_supermartingale_flags_increase():
    g = np.tile(np.linspace(1, 2, 11), (50, 1)) + np.random.default_rng(0).normal(size=(50, 11)) * 1e-3
    assert not supermartingale_test(g).passed


def test_dominance_merton():
    c = merton_coeffs()
    f = simulate_factors(c, INF, TimeGrid(1.0, 50), [0.0], 20_000, 8)
    opt = constant_strategy([2.5])
    rep = utility_dominance_test(f, c, U, opt, perturbed_strategies(opt), value=2.0 * math.exp(0.04625))
    assert rep.passed, rep.details
    assert len(rep.details["z_scores"]) == 10
    assert rep.details["value_z"] < 3
    json.dumps(rep.as_dict())


def test_dominance_identical_strategy():
    c = merton_coeffs()
    f = simulate_factors(c, INF, TimeGrid(1.0, 10), [0.0], 500, 8)
    opt = constant_strategy([2.5])
    rep = utility_dominance_test(f, c, U, opt, {"same": opt})
    assert rep.details["z_scores"]["same"] == 0.0 and rep.passed


def test_dominance_catches_better_candidate():
    c = merton_coeffs()
    f = simulate_factors(c, INF, TimeGrid(1.0, 50), [0.0], 20_000, 9)
    rep = utility_dominance_test(f, c, U, constant_strategy([0.0]), {"merton": constant_strategy([2.5])})
    assert not rep.passed


def test_perturbations_cover_eps_set():
    names = list(perturbed_strategies(constant_strategy([0.0])))
    eps = sorted({n.split(",")[0] for n in names})
    assert eps == ["eps=+0.25", "eps=+0.50", "eps=-0.25", "eps=-0.50"]
