"""Least-squares Monte Carlo solver for the quadratic log-adjoint BSDE.

The pair ``(p_hat, q_hat)`` solves

    dp_hat = -f(t, q_hat) dt + q_hat . dW,    p_hat(T) = 0,
    f = gamma r + gamma~ |theta|^2 / 2 + q_hat* (I + gamma~ sigma~) q_hat / 2 + gamma~ theta . q_hat,

and the optimal strategy is ``(sigma sigma*)^{-1} ((mu - r 1) + sigma q_hat) / (1 - gamma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .delay_sde import FactorPaths, Strategy, TimeGrid, simulate_factors
from .errors import ConfigError, ExponentOverflowError, PicardDivergenceError
from .market_model import (
    Array,
    CoefficientSet,
    DelaySpec,
    MarketTerms,
    PowerUtility,
    StrategyTerms,
    as_batch,
    market_terms,
)
from .regression import BasisSpec, FittedBasis, check_feature_budget, least_squares

DEFAULT_CLIP = 50.0
EXP_LIMIT = 700.0


@dataclass(frozen=True)
class BsdeDriverParams:
    gamma: float

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def gamma_tilde(self) -> float:
        return self.gamma / (1.0 - self.gamma)


def driver_f(params: BsdeDriverParams, terms: MarketTerms, qhat) -> Array:
    """Quadratic driver evaluated per state; ``qhat`` has shape ``(P, N)``."""
    gt = params.gamma_tilde
    q = np.asarray(qhat, dtype=float).reshape(terms.theta.shape)
    quad = np.sum(q * q, axis=1) + gt * np.einsum("pi,pij,pj->p", q, terms.proj, q)
    return (params.gamma * terms.r + 0.5 * gt * np.sum(terms.theta**2, axis=1)
            + 0.5 * quad + gt * np.sum(terms.theta * q, axis=1))


def driver_at(params: BsdeDriverParams, coeffs: CoefficientSet, y, v, z, qhat) -> Array:
    return driver_f(params, market_terms(coeffs, y, v, z), qhat)


def _inputs(paths: FactorPaths, k: int, idx=slice(None)) -> Array:
    y, v, z = paths.state(k, idx)
    cols = [y, v[:, None]]
    if paths.has_z:
        cols.append(z)
    return np.concatenate(cols, axis=1)


def _state_inputs(y, v, z, has_z: bool) -> Array:
    cols = [y, v[:, None]]
    if has_z:
        cols.append(z)
    return np.concatenate(cols, axis=1)


@dataclass
class StepFit:
    """Regression representation of one time step."""

    basis: FittedBasis
    cond_mean: Array  # (F,)  E[p_hat_{k+1} | state_k]
    q_coef: Array  # (F, N)


@dataclass
class BsdeGridSolution:
    """Per-step regression fits plus in-sample values on the simulation paths."""

    t: Array
    steps: list[StepFit]
    p_hat0: float
    p_paths: Array  # (P, K+1)
    q_paths: Array  # (P, K, N)
    coeffs: CoefficientSet
    gamma: float
    has_z: bool
    clip: float
    clip_count: int = 0
    picard_deltas: list = field(default_factory=list)
    factors: FactorPaths | None = None

    @property
    def K(self) -> int:
        return len(self.t) - 1

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def q_hat(self, k: int, y, v, z=None) -> Array:
        y, v, z = as_batch(y, v, z, self.coeffs.dims)
        fit = self.steps[min(k, self.K - 1)]
        x = _state_inputs(y, v, z, self.has_z)
        return np.clip(fit.basis.design(x) @ fit.q_coef, -self.clip, self.clip)

    def p_hat(self, k: int, y, v, z=None) -> Array:
        y, v, z = as_batch(y, v, z, self.coeffs.dims)
        if k >= self.K:
            return np.zeros(len(v))
        fit = self.steps[k]
        x = _state_inputs(y, v, z, self.has_z)
        q = np.clip(fit.basis.design(x) @ fit.q_coef, -self.clip, self.clip)
        f = driver_at(BsdeDriverParams(self.gamma), self.coeffs, y, v, z, q)
        return fit.basis.design(x) @ fit.cond_mean + f * self.dt

    def strategy(self) -> Strategy:
        """Optimal strategy reading ``q_hat`` off the simulation paths by index."""

        def pi(k, t, y, v, z, idx):
            q = self.q_paths[idx, min(k, self.K - 1)]
            return optimal_pi_from_qhat(self.coeffs, self.gamma, y, v, z, q).total

        return pi

    def feedback_strategy(self) -> Strategy:
        """Optimal strategy evaluating the regression fits at arbitrary states."""

        def pi(k, t, y, v, z, idx):
            q = self.q_hat(k, y, v, z)
            return optimal_pi_from_qhat(self.coeffs, self.gamma, y, v, z, q).total

        return pi


def _backward_pass(paths, terms, params, basis_spec, clip, targets_fn, K, dt, N):
    """Shared backward induction; ``targets_fn(k, p_next)`` gives the regressand."""
    P = paths.n_paths
    p_vals = np.zeros((P, K + 1))
    q_vals = np.zeros((P, K, N))
    steps: list[StepFit | None] = [None] * K
    clips = 0
    for k in range(K - 1, -1, -1):
        x = _inputs(paths, k)
        basis = FittedBasis.fit(x, basis_spec)
        phi = basis.design(x)
        F = basis.size
        target = targets_fn(k, p_vals[:, k + 1])
        dW = paths.dW[:, k]
        # joint fit of target ~ a(x) + b(x) . dW; b estimates q_hat
        design = np.concatenate([phi] + [phi * dW[:, [j]] for j in range(N)], axis=1)
        coef = least_squares(design, target, step=k)
        cond_mean = coef[:F]
        q_coef = coef[F:].reshape(N, F).T
        q = phi @ q_coef
        clipped = np.abs(q) > clip
        clips += int(np.count_nonzero(clipped))
        q = np.clip(q, -clip, clip)
        q_vals[:, k] = q
        p_vals[:, k] = phi @ cond_mean + driver_f(params, terms[k], q) * dt
        steps[k] = StepFit(basis, cond_mean, q_coef)
    return p_vals, q_vals, steps, clips


def _increment_pass(paths, terms, params, basis_spec, clip, K, dt, N):
    """Variant estimating ``q_hat`` from ``E[(p_{k+1} - E_k p_{k+1}) dW] / dt``."""
    P = paths.n_paths
    p_vals = np.zeros((P, K + 1))
    q_vals = np.zeros((P, K, N))
    steps = [None] * K
    clips = 0
    for k in range(K - 1, -1, -1):
        x = _inputs(paths, k)
        basis = FittedBasis.fit(x, basis_spec)
        phi = basis.design(x)
        p_next = p_vals[:, k + 1]
        cond_mean = least_squares(phi, p_next, step=k)
        resid = p_next - phi @ cond_mean
        q_coef = least_squares(phi, resid[:, None] * paths.dW[:, k] / dt, step=k)
        q = phi @ q_coef
        clipped = np.abs(q) > clip
        clips += int(np.count_nonzero(clipped))
        q = np.clip(q, -clip, clip)
        q_vals[:, k] = q
        p_vals[:, k] = phi @ cond_mean + driver_f(params, terms[k], q) * dt
        steps[k] = StepFit(basis, cond_mean, q_coef)
    return p_vals, q_vals, steps, clips


def lsmc_solve(
    coeffs: CoefficientSet,
    delay: DelaySpec,
    utility: PowerUtility,
    grid: TimeGrid,
    y0,
    basis: BasisSpec = BasisSpec(),
    n_paths: int = 10_000,
    n_picard: int = 2,
    seed: int = 0,
    clip: float = DEFAULT_CLIP,
    workers: int = 1,
    antithetic: bool = False,
    q_method: str = "joint",
    factors: FactorPaths | None = None,
) -> BsdeGridSolution:
    """Backward regression solve of the log-adjoint BSDE.

    Sweep 0 is the one-step scheme: ``p_hat_k = E_k[p_hat_{k+1}] + f(q_hat_k) dt``
    with ``q_hat_k`` read off a joint regression of ``p_hat_{k+1}`` on
    ``[phi(x_k), phi(x_k) dW_k]`` (``q_method="joint"``) or estimated from the
    centred increment ``E_k[(p_hat_{k+1} - E_k p_hat_{k+1}) dW_k] / dt``
    (``q_method="increment"``).  Each Picard sweep then regresses the pathwise
    sums ``sum_{j>k} (f_j dt - q_hat_j . dW_j)`` with ``q_hat`` frozen from the
    previous sweep.  The sup-change of the fitted ``p_hat`` between sweeps is
    recorded; two consecutive increases raise :class:`PicardDivergenceError`.
    """
    if q_method not in ("joint", "increment"):
        raise ConfigError(f"unknown q_method {q_method!r}")
    if factors is None:
        factors = simulate_factors(coeffs, delay, grid, y0, n_paths, seed,
                                   workers=workers, antithetic=antithetic)
    P, K, dt = factors.n_paths, factors.K, factors.dt
    N = coeffs.dims.n_noise
    n_inputs = _inputs(factors, 0, slice(0, 1)).shape[1]
    check_feature_budget(basis.n_features(n_inputs) * (N + 1 if q_method == "joint" else 1), P)
    params = BsdeDriverParams(utility.gamma)
    terms = [market_terms(coeffs, *factors.state(k)) for k in range(K + 1)]

    if q_method == "joint":
        p_vals, q_vals, steps, clips = _backward_pass(
            factors, terms, params, basis, clip, lambda k, p_next: p_next, K, dt, N)
    else:
        p_vals, q_vals, steps, clips = _increment_pass(
            factors, terms, params, basis, clip, K, dt, N)

    deltas: list[float] = []
    for _ in range(n_picard):
        q_old = q_vals
        f_old = np.stack([driver_f(params, terms[k], q_old[:, k]) for k in range(K)], axis=1)
        incr = f_old * dt - np.einsum("pkn,pkn->pk", q_old, factors.dW)
        # S_k = sum_{j >= k} incr_j, so the regressand at step k is S_{k+1}
        tail = np.zeros((P, K + 1))
        tail[:, :K] = np.cumsum(incr[:, ::-1], axis=1)[:, ::-1]
        new_p, new_q, new_steps, new_clips = _backward_pass(
            factors, terms, params, basis, clip, lambda k, _: tail[:, k + 1], K, dt, N)
        deltas.append(float(np.max(np.abs(new_p - p_vals))))
        p_vals, q_vals, steps, clips = new_p, new_q, new_steps, clips + new_clips
        if len(deltas) >= 3 and deltas[-1] > deltas[-2] > deltas[-3]:
            raise PicardDivergenceError(deltas)

    # at t = 0 every path shares the state, so the fit is the intercept there
    p0 = float(np.mean(p_vals[:, 0]))
    return BsdeGridSolution(factors.t, steps, p0, p_vals, q_vals, coeffs, utility.gamma,
                            factors.has_z, clip, clips, deltas, factors)


def optimal_pi_from_qhat(coeffs: CoefficientSet, gamma: float, y, v, z, qhat) -> StrategyTerms:
    """``(sigma sigma*)^{-1} ((mu - r 1) + sigma q_hat) / (1 - gamma)``, split in two terms."""
    terms = market_terms(coeffs, y, v, z)
    P, m, N = terms.sigma.shape
    q = np.asarray(qhat, dtype=float).reshape(P, N)
    sst = np.einsum("pij,pkj->pik", terms.sigma, terms.sigma)
    rhs = np.stack([terms.excess, np.einsum("pij,pj->pi", terms.sigma, q)], axis=2)
    sol = np.linalg.solve(sst, rhs) / (1.0 - gamma)
    return StrategyTerms(sol[:, :, 0], sol[:, :, 1])


def forward_p_hat(factors: FactorPaths, coeffs: CoefficientSet, gamma: float, p0,
                  qhat_fn) -> Array:
    """Run ``p_hat`` forward from ``p0`` with ``q_hat_k = qhat_fn(k, y, v, z)``.

    Returns ``(P, K+1)``; for an exact solution ``p_hat_K`` is close to zero.
    """
    params = BsdeDriverParams(gamma)
    P, K, dt = factors.n_paths, factors.K, factors.dt
    out = np.empty((P, K + 1))
    out[:, 0] = p0
    for k in range(K):
        y, v, z = factors.state(k)
        q = np.asarray(qhat_fn(k, y, v, z), dtype=float).reshape(P, -1)
        f = driver_f(params, market_terms(coeffs, y, v, z), q)
        out[:, k + 1] = out[:, k] - f * dt + np.sum(q * factors.dW[:, k], axis=1)
    return out


def explicit_tilde_X(factors: FactorPaths, coeffs: CoefficientSet, utility: PowerUtility,
                     q_paths: Array) -> Array:
    """Transformed optimal wealth from its exponential representation.

    ``log X~`` gains ``[gamma r + gamma~ (1 - 2 gamma) |theta|^2 / (2 (1 - gamma))
    - gamma~^2 theta . q - gamma q* sigma~ q / (2 (1 - gamma)^2)] dt
    + gamma~ (theta + sigma~ q) . dW`` per step, using the paths' own increments.
    """
    g, gt = utility.gamma, utility.gamma_tilde
    P, K, dt = factors.n_paths, factors.K, factors.dt
    logx = np.empty((P, K + 1))
    logx[:, 0] = math.log(float(utility.U(utility.x)))
    for k in range(K):
        mt = market_terms(coeffs, *factors.state(k))
        q = q_paths[:, k]
        proj_q = np.einsum("pij,pj->pi", mt.proj, q)
        drift = (g * mt.r + 0.5 * gt * (1 - 2 * g) / (1 - g) * np.sum(mt.theta**2, axis=1)
                 - gt**2 * np.sum(mt.theta * q, axis=1)
                 - 0.5 * g / (1 - g) ** 2 * np.sum(q * proj_q, axis=1))
        logx[:, k + 1] = logx[:, k] + drift * dt + gt * np.sum((mt.theta + proj_q) * factors.dW[:, k], axis=1)
    top = float(np.max(logx))
    if top > EXP_LIMIT:
        raise ExponentOverflowError(top, EXP_LIMIT)
    return np.exp(logx)


def value_at_zero(p_hat0, utility: PowerUtility) -> float:
    """Optimal expected utility ``x^gamma exp(p_hat(0)) / gamma``."""
    p0 = p_hat0.p_hat0 if isinstance(p_hat0, BsdeGridSolution) else float(p_hat0)
    return float(utility.U(utility.x)) * math.exp(p0)


@dataclass
class ContractionReport:
    xi_sup: float
    beta: float
    beta_alt: float
    radius: float
    smallness_holds: bool

    def as_dict(self) -> dict:
        return dict(xi_sup=self.xi_sup, beta=self.beta, beta_alt=self.beta_alt,
                    radius=self.radius, smallness_holds=self.smallness_holds)


def contraction_diagnostics(coeffs: CoefficientSet, delay: DelaySpec, grid: TimeGrid, y0,
                            gamma: float, n_paths: int = 1000, seed: int = 0,
                            factors: FactorPaths | None = None) -> ContractionReport:
    """Sampled smallness check for local existence of the quadratic BSDE.

    ``xi = int_0^T (gamma r + gamma~ |theta|^2 / 2) dt`` (sup over paths) is
    compared with ``1 / (4 beta)``, ``beta = 2 sup ||I + gamma~ sigma~||``.
    ``beta_alt`` uses ``||I - sigma~||`` instead.  Advisory only.
    """
    if factors is None:
        factors = simulate_factors(coeffs, delay, grid, y0, n_paths, seed)
    gt = gamma / (1 - gamma)
    K, dt = factors.K, factors.dt
    N = coeffs.dims.n_noise
    eye = np.eye(N)
    rate = np.empty((factors.n_paths, K + 1))
    norm_plus = norm_minus = 0.0
    for k in range(K + 1):
        mt = market_terms(coeffs, *factors.state(k))
        rate[:, k] = gamma * mt.r + 0.5 * gt * np.sum(mt.theta**2, axis=1)
        norm_plus = max(norm_plus, float(np.max(np.linalg.norm(eye + gt * mt.proj, 2, axis=(1, 2)))))
        norm_minus = max(norm_minus, float(np.max(np.linalg.norm(eye - mt.proj, 2, axis=(1, 2)))))
    xi = dt * (rate.sum(axis=1) - 0.5 * (rate[:, 0] + rate[:, -1]))
    xi_sup = float(np.max(np.abs(xi)))
    beta = 2.0 * norm_plus
    return ContractionReport(xi_sup, beta, 2.0 * norm_minus, 1.0 / (math.sqrt(2) * beta),
                             bool(xi_sup < 1.0 / (4.0 * beta)))


__all__ = [
    "BsdeDriverParams", "BsdeGridSolution", "ContractionReport", "StepFit",
    "contraction_diagnostics", "driver_at", "driver_f", "explicit_tilde_X", "forward_p_hat",
    "lsmc_solve", "optimal_pi_from_qhat", "value_at_zero",
]
