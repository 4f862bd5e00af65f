"""Explicitly solvable special cases.

Two linear-quadratic settings admit closed-form or ODE solutions for the
log-adjoint ``p_hat = eta(t, y, v)``:

* infinite delay, ``h(y) = y``: ``eta`` is quadratic in ``(y, v)`` with
  coefficients solving a backward Riccati system;
* finite pointwise delay under a set of linear parameter identities: ``eta`` is
  linear in ``(y, v)`` and ``q_hat`` is deterministic.

A Feynman-Kac Monte Carlo estimator of ``eta`` cross-checks the Riccati route.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .delay_sde import BLOCK_SIZE, TimeGrid, simulate_factors
from .errors import BlowUpError, ConfigError, ConstraintError, ExponentOverflowError
from .market_model import (
    Array,
    CoefficientSet,
    DelaySpec,
    ModelDims,
    StrategyTerms,
    as_batch,
    build_coefficients,
    market_terms,
)

BLOWUP_THRESHOLD = 1e8
CONSTRAINT_TOL = 1e-10
EXP_LIMIT = 700.0
CHUNK_BLOCKS = 16

# Conventions adopted where the printed formulas are ambiguous; surfaced in
# CLI output metadata.
CONVENTIONS = {
    "psi4_rhs": "-0.5 * sigma_F**2 * psi1",
    "pointwise_psi_time": "T - t",
    "dV_delay_factor": "exp(-lambda * delta)",
    "pointwise_terminal": "eta(T) = -(beta3/alpha3) y; zero only if beta3 = 0",
}


@dataclass(frozen=True)
class LqParams:
    """Parameters of the linear-quadratic families.

    Two-entry ``alpha``/``beta`` select the infinite-delay case, three entries
    the pointwise-delay case (the third entries multiply ``z``).
    """

    alpha: tuple
    beta: tuple
    sigma_F: float = 1.0
    lam: float = 1.0
    delta: float = math.inf
    gamma: float = 0.5
    T: float = 1.0
    sigma: float = 0.2
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.alpha) != len(self.beta) or len(self.alpha) not in (2, 3):
            raise ConfigError("alpha and beta must both have 2 (infinite) or 3 (pointwise) entries")
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.T > 0:
            raise ConfigError("T must be positive")

    @property
    def pointwise(self) -> bool:
        return len(self.alpha) == 3

    @property
    def c(self) -> float:
        """Coefficient ``sigma_F^2 / (1 - gamma)`` of the squared gradient."""
        return self.sigma_F**2 / (1.0 - self.gamma)

    @property
    def ratio(self) -> float:
        """``beta_3 / alpha_3`` (pointwise case)."""
        if self.alpha[2] == 0:
            raise ConstraintError("alpha_3 must be non-zero")
        return self.beta[2] / self.alpha[2]

    def delay(self, interpolate: bool = True) -> DelaySpec:
        return DelaySpec(self.lam, self.delta, interpolate=interpolate)

    def coefficients(self) -> CoefficientSet:
        family = "lq_pointwise" if self.pointwise else "lq_infinite"
        return build_coefficients(
            family,
            ModelDims(1, 1, 1),
            self.gamma,
            dict(alpha=list(self.alpha), beta=list(self.beta), sigma_F=self.sigma_F,
                 sigma=self.sigma, theta=self.theta),
        )

    @classmethod
    def from_coefficients(cls, coeffs: CoefficientSet, delay: DelaySpec, gamma: float, T: float):
        if coeffs.family not in ("lq_infinite", "lq_pointwise"):
            raise ConfigError(f"family {coeffs.family!r} is not linear-quadratic")
        p = coeffs.params
        return cls(p["alpha"], p["beta"], p["sigma_F"], delay.lam, delay.delta, gamma, T,
                   p["sigma"], p["theta"])


# --------------------------------------------------------------------------
# infinite delay: Riccati system
# --------------------------------------------------------------------------


def riccati_rhs(params: LqParams, psi: Array) -> Array:
    """Time derivative of ``(psi1, psi2, psi3, psi4)``."""
    a1, a2 = params.alpha
    b1, b2 = params.beta
    lam, c = params.lam, params.c
    p1, p2, p3, _ = psi
    return np.array([
        -2 * a1 * p1 - c * p1**2 - 2 * p3 - 2 * b1,
        2 * lam * p2 - 2 * a2 * p3 - c * p3**2 - 2 * b2,
        (lam - a1) * p3 - c * p1 * p3 - a2 * p1 - p2,
        -0.5 * params.sigma_F**2 * p1,
    ])


def _rk4_step(params, psi, h):
    """One RK4 step of size ``h`` (negative when integrating backward)."""
    k1 = riccati_rhs(params, psi)
    k2 = riccati_rhs(params, psi + 0.5 * h * k1)
    k3 = riccati_rhs(params, psi + 0.5 * h * k2)
    k4 = riccati_rhs(params, psi + h * k3)
    return psi + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class RiccatiSolution:
    t: Array  # (K+1,) increasing
    psi: Array  # (K+1, 4)
    params: LqParams

    def at(self, t) -> Array:
        """``psi`` linearly interpolated at times ``t``; shape ``(len(t), 4)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.t[0], self.t[-1]
        span = hi - lo
        if np.any(t < lo - 1e-12 * span) or np.any(t > hi + 1e-12 * span):
            raise ValueError(f"t outside the solution grid [{lo}, {hi}]")
        return np.column_stack([np.interp(t, self.t, self.psi[:, i]) for i in range(4)])


def solve_riccati(params: LqParams, grid: TimeGrid | int = 1000,
                  threshold: float = BLOWUP_THRESHOLD,
                  enforce_constraint: bool = True) -> RiccatiSolution:
    """Integrate the Riccati system backward from ``psi(T) = 0`` with RK4.

    Raises :class:`BlowUpError` (blow-up time located by bisection on the last
    step) when any component exceeds ``threshold``.
    """
    if params.pointwise:
        raise ConfigError("the Riccati system applies to the infinite-delay case")
    if enforce_constraint and params.beta[0] >= 0:
        raise ConstraintError(f"need beta_1 < 0, got {params.beta[0]}")
    if isinstance(grid, int):
        grid = TimeGrid(params.T, grid)
    if not math.isclose(grid.T, params.T):
        raise ConfigError(f"grid ends at {grid.T}, parameters have T={params.T}")
    t, h = grid.times, grid.dt
    psi = np.zeros((grid.K + 1, 4))
    for k in range(grid.K, 0, -1):
        nxt = _rk4_step(params, psi[k], -h)
        if not (np.all(np.isfinite(nxt)) and np.max(np.abs(nxt)) <= threshold):
            raise BlowUpError(_bisect_blowup(params, psi[k], t[k], h, threshold), threshold)
        psi[k - 1] = nxt
    return RiccatiSolution(t, psi, params)


def _bisect_blowup(params, psi, t_start, h, threshold, iters=60):
    ok, bad = 0.0, h
    for _ in range(iters):
        mid = 0.5 * (ok + bad)
        trial = _rk4_step(params, psi, -mid)
        if np.all(np.isfinite(trial)) and np.max(np.abs(trial)) <= threshold:
            ok = mid
        else:
            bad = mid
    return t_start - bad


def eta_lq(sol: RiccatiSolution, t, y, v):
    """``eta = psi1 y^2/2 + psi2 v^2/2 + psi3 y v + psi4`` and ``d eta / dy``."""
    p1, p2, p3, p4 = sol.at(t).T
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.ndim(t) == 0:
        p1, p2, p3, p4 = p1[0], p2[0], p3[0], p4[0]
    eta = 0.5 * p1 * y**2 + 0.5 * p2 * v**2 + p3 * y * v + p4
    return eta, p1 * y + p3 * v


def _scalar_market(coeffs: CoefficientSet, y, v, z):
    if (coeffs.dims.n_assets, coeffs.dims.n_factors, coeffs.dims.n_noise) != (1, 1, 1):
        raise ConfigError("closed-form strategies are one-dimensional")
    mt = market_terms(coeffs, y, v, z)
    s = mt.sigma[:, 0, 0]
    if np.any(s == 0):
        raise ConstraintError("sigma vanishes")
    sf = np.asarray(coeffs.sigma_F(*as_batch(y, v, z, coeffs.dims)), dtype=float).reshape(-1)
    return mt.excess[:, 0], s, sf


def optimal_pi_infinite(sol: RiccatiSolution, coeffs: CoefficientSet, t, y, v) -> StrategyTerms:
    """Myopic and hedging terms of the optimal strategy for infinite delay."""
    g = sol.params.gamma
    excess, s, sf = _scalar_market(coeffs, y, v, None)
    _, grad = eta_lq(sol, t, np.reshape(y, -1), np.reshape(v, -1))
    return StrategyTerms(excess / ((1 - g) * s**2), sf * grad / ((1 - g) * s))


class FeynmanKacEstimate(NamedTuple):
    eta: float
    se: float
    max_exponent: float


def tilted_coefficients(coeffs: CoefficientSet, gamma: float) -> CoefficientSet:
    """Same coefficients with factor drift ``b + gamma~ sigma_F theta``."""
    gt = gamma / (1.0 - gamma)

    def b(y, v, z):
        theta = market_terms(coeffs, y, v, z).theta
        sf = np.asarray(coeffs.sigma_F(y, v, z), dtype=float).reshape(len(v), y.shape[1], -1)
        return coeffs.b(y, v, z) + gt * np.einsum("pij,pj->pi", sf, theta)

    return dataclasses.replace(coeffs, b=b)


def feynman_kac_eta(coeffs: CoefficientSet, delay: DelaySpec, gamma: float, T: float,
                    t: float, y, v: float, n_paths: int, seed: int,
                    n_steps: int = 500, workers: int = 1,
                    antithetic: bool = False) -> FeynmanKacEstimate:
    """Monte Carlo ``eta(t, y, v)`` from its Feynman-Kac representation.

    ``eta = (1 - gamma) log E[exp(int_t^T (gamma r + gamma~ |theta|^2 / 2) / (1 - gamma) ds)]``
    under the drift-tilted factor dynamics.  The standard error of the inner
    mean is propagated through the logarithm by the delta method.
    """
    if coeffs.uses_z or not delay.infinite:
        raise ConfigError("Feynman-Kac estimator needs infinite delay and no pointwise factor")
    if not 0 <= t < T:
        raise ValueError(f"need 0 <= t < T, got t={t}")
    tilted = tilted_coefficients(coeffs, gamma)
    grid = TimeGrid(T, n_steps, t0=t)
    gt = gamma / (1.0 - gamma)
    expo = np.empty(n_paths)
    # path chunks aligned with RNG blocks keep memory flat and results seed-exact
    chunk = CHUNK_BLOCKS * BLOCK_SIZE
    for lo in range(0, n_paths, chunk):
        size = min(chunk, n_paths - lo)
        paths = simulate_factors(tilted, delay, grid, y, size, seed, workers=workers,
                                 antithetic=antithetic, v0=v, first_block=lo // BLOCK_SIZE)
        rate = np.empty((size, n_steps + 1))
        for k in range(n_steps + 1):
            mt = market_terms(coeffs, paths.Y[:, k], paths.V[:, k], None)
            rate[:, k] = (gamma * mt.r + 0.5 * gt * np.sum(mt.theta**2, axis=1)) / (1 - gamma)
        expo[lo:lo + size] = grid.dt * (rate.sum(axis=1) - 0.5 * (rate[:, 0] + rate[:, -1]))
    top = float(np.max(expo))
    if top > EXP_LIMIT:
        raise ExponentOverflowError(top, EXP_LIMIT)
    w = np.exp(expo - top)
    mean = float(w.mean())
    se_inner = float(w.std(ddof=1)) / math.sqrt(n_paths) if n_paths > 1 else 0.0
    eta = (1 - gamma) * (top + math.log(mean))
    return FeynmanKacEstimate(eta, (1 - gamma) * se_inner / mean, top)


# --------------------------------------------------------------------------
# pointwise delay: closed form
# --------------------------------------------------------------------------


@dataclass
class ConstraintReport:
    residuals: Array  # (4,)
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.residuals) < self.tol))


def check_pointwise_constraints(params: LqParams, tol: float = CONSTRAINT_TOL) -> ConstraintReport:
    """Residuals of the four linear identities that make ``eta`` linear."""
    if not params.pointwise:
        raise ConfigError("constraints apply to the pointwise-delay case")
    a1, a2, a3 = params.alpha
    b1, b2, _ = params.beta
    k = params.ratio
    e = math.exp(params.lam * params.delta)
    res = np.array([
        a1 + e * a3 - 1.0,
        -a1 * k + b1 - 1.0,
        a2 - params.lam * e * a3 - a3 * e,
        -a2 * k + b2 - a3 * e,
    ])
    return ConstraintReport(res, tol)


@dataclass
class PointwiseSolution:
    """``p_hat = Q (y + e^{lam delta} a3 v) - k y + psi(t)``, ``q_hat = sigma_F (Q - k)``.

    Here ``Q = e^{T-t} - 1`` and ``k = beta_3 / alpha_3``.  The formula solves the
    backward PDE for any admissible ``k`` but leaves ``-k y`` at ``t = T``, so it
    is the optimal-portfolio adjoint only when ``beta_3 = 0``.
    """

    params: LqParams

    @property
    def k(self) -> float:
        return self.params.ratio

    def Q(self, t):
        return np.expm1(self.params.T - np.asarray(t, dtype=float))

    def psi(self, t):
        tau = self.params.T - np.asarray(t, dtype=float)
        a = 1.0 + self.k
        body = 0.5 * np.expm1(2 * tau) - 2 * a * np.expm1(tau) + a * a * tau
        return 0.5 * self.params.c * body

    def v_weight(self) -> float:
        return math.exp(self.params.lam * self.params.delta) * self.params.alpha[2]

    def p_hat(self, t, y, v):
        Q = self.Q(t)
        return Q * (np.asarray(y) + self.v_weight() * np.asarray(v)) - self.k * np.asarray(y) + self.psi(t)

    def terminal_value(self, y):
        """``eta(T, y, v) = -k y``; zero, as the adjoint requires, only when ``beta_3 = 0``."""
        return -self.k * np.asarray(y, dtype=float)

    @property
    def terminal_consistent(self) -> bool:
        return self.k == 0.0

    def grad_y(self, t):
        return self.Q(t) - self.k

    def q_hat(self, t):
        return self.params.sigma_F * self.grad_y(t)

    def table(self, grid: TimeGrid) -> Array:
        """Columns ``t, Q, psi, q_hat`` on ``grid``."""
        t = grid.times
        return np.column_stack([t, self.Q(t), self.psi(t), self.q_hat(t)])


def pointwise_solution(params: LqParams, tol: float = CONSTRAINT_TOL) -> PointwiseSolution:
    report = check_pointwise_constraints(params, tol)
    if not report.passed:
        raise ConstraintError(f"pointwise identities violated, residuals {report.residuals}")
    return PointwiseSolution(params)


def pointwise_pi(sol: PointwiseSolution, coeffs: CoefficientSet, t, y, v, z) -> StrategyTerms:
    """Myopic and hedging terms of the optimal strategy for pointwise delay."""
    g = sol.params.gamma
    excess, s, sf = _scalar_market(coeffs, y, v, z)
    return StrategyTerms(excess / ((1 - g) * s**2), sf * sol.grad_y(t) / ((1 - g) * s))


__all__ = [
    "CONVENTIONS", "ConstraintReport", "FeynmanKacEstimate", "LqParams", "PointwiseSolution",
    "RiccatiSolution", "StrategyTerms", "check_pointwise_constraints", "eta_lq",
    "feynman_kac_eta", "optimal_pi_infinite", "pointwise_pi", "pointwise_solution",
    "riccati_rhs", "solve_riccati", "tilted_coefficients",
]
