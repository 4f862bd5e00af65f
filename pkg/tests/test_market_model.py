import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import merton_coeffs
from delayfolio.errors import ConfigError, IncompleteMarketError, SingularMatrixError
from delayfolio.market_model import (
    CoefficientSet,
    DelaySpec,
    ModelDims,
    PowerUtility,
    build_coefficients,
    check_assumptions,
    eval_projection,
    eval_theta,
    families,
    market_terms,
    register_family,
    require_complete,
    sample_states,
)


def two_noise(sigma, mu, r=0.03):
    return build_coefficients("constant", ModelDims(1, 1, 2), 0.5,
                              dict(r=r, mu=mu, sigma=[sigma]))


def test_theta_one_dimensional():
    assert eval_theta(merton_coeffs(), [0.0], 0.0)[0, 0] == pytest.approx(0.25, abs=1e-14)


def test_theta_zero_excess():
    c = merton_coeffs(mu=0.03)
    assert np.all(eval_theta(c, [0.0], 0.0) == 0.0)


def test_theta_incomplete():
    th = eval_theta(two_noise([0.2, 0.0], 0.08), [0.0], 0.0)[0]
    np.testing.assert_allclose(th, [0.25, 0.0], atol=1e-14)


def test_projection_square_is_identity():
    c = build_coefficients("constant", ModelDims(2, 1, 2), 0.5,
                           dict(r=0.01, mu=[0.05, 0.07], sigma=[[0.2, 0.05], [0.0, 0.3]]))
    np.testing.assert_allclose(eval_projection(c, [0.0], 0.0)[0], np.eye(2), atol=1e-12)


def test_projection_incomplete():
    p = eval_projection(two_noise([0.2, 0.0], 0.08), [0.0], 0.0)[0]
    np.testing.assert_allclose(p, [[1, 0], [0, 0]], atol=1e-14)


def random_market(seed, m, N):
    rng = np.random.default_rng(seed)
    sigma = rng.normal(size=(m, N))
    return build_coefficients("constant", ModelDims(m, 1, N), 0.5,
                              dict(r=0.02, mu=rng.normal(size=m) * 0.1, sigma=sigma))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 3), extra=st.integers(0, 2))
def test_projection_idempotent_symmetric(seed, m, extra):
    p = eval_projection(random_market(seed, m, m + extra), [0.0], 0.0)[0]
    assert np.max(np.abs(p @ p - p)) < 1e-10
    assert np.max(np.abs(p - p.T)) < 1e-10
    assert np.trace(p) == pytest.approx(m, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 3), extra=st.integers(0, 2))
def test_theta_rotates_with_noise(seed, m, extra):
    """Rotating the Brownian basis rotates theta and conjugates the projection."""
    N = m + extra
    rng = np.random.default_rng(seed + 1)
    o, _ = np.linalg.qr(rng.normal(size=(N, N)))
    rng = np.random.default_rng(seed)
    sigma = rng.normal(size=(m, N))
    mu = rng.normal(size=m) * 0.1
    base = build_coefficients("constant", ModelDims(m, 1, N), 0.5, dict(r=0.02, mu=mu, sigma=sigma))
    rot = build_coefficients("constant", ModelDims(m, 1, N), 0.5, dict(r=0.02, mu=mu, sigma=sigma @ o))
    a, b = market_terms(base, [0.0], 0.0, None), market_terms(rot, [0.0], 0.0, None)
    np.testing.assert_allclose(b.theta[0], o.T @ a.theta[0], atol=1e-10)
    np.testing.assert_allclose(b.proj[0], o.T @ a.proj[0] @ o, atol=1e-10)
    # |theta| and the excess return it prices are basis free
    np.testing.assert_allclose(b.sigma[0] @ b.theta[0], b.excess[0], atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(gamma=st.floats(0.01, 0.99), x=st.floats(1e-3, 1e3))
def test_inverse_marginal_round_trip(gamma, x):
    u = PowerUtility(gamma)
    assert u.inverse_marginal(u.marginal(x)) == pytest.approx(x, rel=1e-9)
    assert u.U_inverse(u.U(x)) == pytest.approx(x, rel=1e-9)


def test_utility_validation():
    with pytest.raises(ConfigError):
        PowerUtility(1.0)
    with pytest.raises(ConfigError):
        PowerUtility(0.5, x=0.0)


def test_dims_validation():
    with pytest.raises(ConfigError):
        ModelDims(2, 1, 1)
    with pytest.raises(ConfigError):
        ModelDims(1, 0, 1)


def test_delay_validation():
    with pytest.raises(ConfigError):
        DelaySpec(0.0, 1.0)
    with pytest.raises(ConfigError):
        DelaySpec(1.0, -1.0)
    assert DelaySpec(1.0, float("inf")).infinite


def test_singular_sigma_raises():
    c = merton_coeffs(sigma=0.0)
    with pytest.raises(SingularMatrixError):
        market_terms(c, [0.0], 0.0, None)


def test_assumptions_constant_pass():
    y, v, z = sample_states(ModelDims(1, 1, 1), -1, 1, 50)
    assert check_assumptions(merton_coeffs(), y, v, z).passed


def test_assumptions_negative_rate_flag():
    y, v, z = sample_states(ModelDims(1, 1, 1), -1, 1, 50)
    rep = check_assumptions(merton_coeffs(r=-1.0, mu=0.0), y, v, z)
    assert "r_negative" in rep.flags


def test_assumptions_singular_flag():
    c = merton_coeffs()
    bad = CoefficientSet(c.dims, c.r, c.mu, lambda y, v, z: np.where(
        (v > 0)[:, None, None], 0.2, 0.0) * np.ones((len(v), 1, 1)), c.b, c.sigma_F, c.h)
    y, v, z = sample_states(ModelDims(1, 1, 1), -1, 1, 50)
    assert "sigma_ill_conditioned" in check_assumptions(bad, y, v, z).flags


def test_unknown_family_and_param():
    with pytest.raises(ConfigError):
        build_coefficients("nope", ModelDims(1, 1, 1), 0.5, {})
    with pytest.raises(ConfigError, match="unknown parameters"):
        build_coefficients("constant", ModelDims(1, 1, 1), 0.5, dict(rr=0.1))


def test_register_family():
    @register_family("test_flat")
    def flat(dims, gamma, level=0.0):
        return build_coefficients("constant", dims, gamma, dict(r=level))

    assert "test_flat" in families()
    c = build_coefficients("test_flat", ModelDims(1, 1, 1), 0.5, dict(level=0.04))
    assert market_terms(c, [0.0], 0.0, None).r[0] == 0.04


def test_affine_family_evaluates():
    c = build_coefficients("affine", ModelDims(1, 1, 1), 0.5,
                           dict(r0=0.01, r_y=0.02, r_v=0.03, mu0=0.05, b_y=-1.0))
    t = market_terms(c, [[2.0]], 1.0, None)
    assert t.r[0] == pytest.approx(0.01 + 0.04 + 0.03)
    assert c.b(np.array([[2.0]]), np.array([1.0]), np.zeros((1, 1)))[0, 0] == -2.0


def test_lq_families_match_their_definition():
    g = 0.5
    c = build_coefficients("lq_pointwise", ModelDims(1, 1, 1), g,
                           dict(alpha=[0.5, 1, 0.25], beta=[1, 0.5, 0], theta=0.3, sigma_F=0.7))
    y, v, z = np.array([[0.4]]), np.array([-0.2]), np.array([[1.1]])
    t = market_terms(c, y, v, z)
    gt = g / (1 - g)
    assert g * t.r[0] + 0.5 * gt * t.theta[0, 0] ** 2 == pytest.approx(1 * 0.4 + 0.5 * -0.2)
    assert c.b(y, v, z)[0, 0] + gt * 0.3 * 0.7 == pytest.approx(0.5 * 0.4 - 0.2 + 0.25 * 1.1)


def test_require_complete():
    with pytest.raises(IncompleteMarketError):
        require_complete(two_noise([0.2, 0.0], 0.08))
