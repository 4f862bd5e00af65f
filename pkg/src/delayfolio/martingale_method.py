"""Complete-market martingale (duality) method and its link to the BSDE.

With state-price density ``H0`` the optimal terminal wealth is
``I(Z(x) H0(T))``, its deflated value process ``M(t) = E[H0(T) I(Z(x) H0(T)) | F_t]``
is a martingale with representation ``dM = psi . dW`` and the optimal strategy
is ``(sigma*)^{-1} (theta + psi / M)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .delay_sde import FactorPaths, Strategy
from .errors import MartingaleEstimateError
from .fbsde_solver import BsdeDriverParams, driver_f
from .market_model import (
    Array,
    CoefficientSet,
    PowerUtility,
    market_terms,
    require_complete,
)
from .regression import BasisSpec, FittedBasis, check_feature_budget, least_squares


@dataclass
class StateDensityPaths:
    log_H0: Array  # (P, K+1)

    @property
    def H0(self) -> Array:
        return np.exp(self.log_H0)

    @property
    def terminal(self) -> Array:
        return np.exp(self.log_H0[:, -1])


def simulate_H0(coeffs: CoefficientSet, factors: FactorPaths) -> StateDensityPaths:
    """``log H0`` accumulated with the factor paths' own increments."""
    require_complete(coeffs)
    P, K, dt = factors.n_paths, factors.K, factors.dt
    log_h = np.zeros((P, K + 1))
    for k in range(K):
        mt = market_terms(coeffs, *factors.state(k))
        log_h[:, k + 1] = (log_h[:, k] - np.sum(mt.theta * factors.dW[:, k], axis=1)
                           - (0.5 * np.sum(mt.theta**2, axis=1) + mt.r) * dt)
    return StateDensityPaths(log_h)


@dataclass
class PhiEstimate:
    phi: float
    phi_se: float
    Zx: float


def compute_phi_Zx(H0_terminal, utility: PowerUtility) -> PhiEstimate:
    """``phi = E[H0(T)^{-gamma~}]`` and the multiplier ``Z(x) = (x / phi)^{gamma - 1}``."""
    w = np.asarray(H0_terminal, dtype=float) ** (-utility.gamma_tilde)
    phi = float(w.mean())
    se = float(w.std(ddof=1)) / math.sqrt(w.size) if w.size > 1 else 0.0
    return PhiEstimate(phi, se, (utility.x / phi) ** (utility.gamma - 1.0))


def budget(z: float, H0_terminal, utility: PowerUtility) -> tuple[float, float]:
    """``Lambda(z) = E[H0(T) I(z H0(T))]`` with its standard error."""
    h = np.asarray(H0_terminal, dtype=float)
    w = h * utility.inverse_marginal(z * h)
    se = float(w.std(ddof=1)) / math.sqrt(w.size) if w.size > 1 else 0.0
    return float(w.mean()), se


@dataclass
class MartingaleSolution:
    phi: PhiEstimate
    M: Array  # (P, K+1)
    psi_over_M: Array  # (P, K, N)
    M0: float
    M0_se: float
    x: float

    @property
    def psi(self) -> Array:
        return self.psi_over_M * self.M[:, :-1, None]

    def strategy(self, coeffs: CoefficientSet) -> Strategy:
        """Optimal strategy on the simulation paths (indexed by path)."""
        K = self.psi_over_M.shape[1]

        def pi(k, t, y, v, z, idx):
            return pi_from_martingale(coeffs, y, v, z, self.psi_over_M[idx, min(k, K - 1)])

        return pi

    def q_hat(self, coeffs: CoefficientSet, gamma: float, factors: FactorPaths) -> Array:
        """``q_hat = -gamma theta + (1 - gamma) psi / M`` on every path and step."""
        out = np.empty_like(self.psi_over_M)
        for k in range(out.shape[1]):
            theta = market_terms(coeffs, *factors.state(k)).theta
            out[:, k] = -gamma * theta + (1 - gamma) * self.psi_over_M[:, k]
        return out


def _features(factors: FactorPaths, k: int, log_h: Array) -> Array:
    y, v, z = factors.state(k)
    cols = [y, v[:, None]]
    if factors.has_z:
        cols.append(z)
    cols.append(log_h[:, [k]])
    return np.concatenate(cols, axis=1)


def estimate_M_and_psi(density: StateDensityPaths, factors: FactorPaths,
                       utility: PowerUtility, basis: BasisSpec = BasisSpec()) -> MartingaleSolution:
    """Regression estimates of ``M(t)`` and ``psi / M`` along the paths.

    ``M_k = (x / phi) H0_k^{-gamma~} g_k`` with ``g_k`` the regression of
    ``(H0_T / H0_k)^{-gamma~}`` on ``(Y, V, Z, log H0)``.  ``psi / M`` comes from a
    joint regression of ``M_{k+1} / M_k`` on ``[phi(x_k), phi(x_k) dW_k]``.
    ``M0`` is re-estimated as the mean of ``M_T exp(-sum_k (psi/M)_k . dW_k + |psi/M|_k^2 dt / 2)``.
    """
    P, K = factors.n_paths, factors.K
    N = factors.dW.shape[2]
    gt = utility.gamma_tilde
    log_h = density.log_H0
    phi = compute_phi_Zx(np.exp(log_h[:, -1]), utility)
    scale = utility.x / phi.phi
    n_in = _features(factors, 0, log_h).shape[1]
    check_feature_budget(basis.n_features(n_in) * (N + 1), P)

    M = np.empty((P, K + 1))
    M[:, K] = scale * np.exp(-gt * log_h[:, K])
    fits = []
    for k in range(K):
        x = _features(factors, k, log_h)
        fb = FittedBasis.fit(x, basis)
        design = fb.design(x)
        target = np.exp(-gt * (log_h[:, K] - log_h[:, k]))
        g = design @ least_squares(design, target, step=k)
        M[:, k] = scale * np.exp(-gt * log_h[:, k]) * g
        fits.append((fb, design))
    bad = M <= 0
    if bad.any():
        p, k = np.argwhere(bad)[0]
        raise MartingaleEstimateError(int(k), int(p))

    psi_m = np.empty((P, K, N))
    for k in range(K):
        fb, design = fits[k]
        dW = factors.dW[:, k]
        joint = np.concatenate([design] + [design * dW[:, [j]] for j in range(N)], axis=1)
        coef = least_squares(joint, M[:, k + 1] / M[:, k], step=k)
        F = fb.size
        psi_m[:, k] = design @ coef[F:].reshape(N, F).T

    # undo dM / M = (psi / M) . dW step by step as a stochastic exponential
    expo = np.einsum("pkn,pkn->p", psi_m, factors.dW) - 0.5 * factors.dt * np.sum(psi_m**2, axis=(1, 2))
    anchor = M[:, K] * np.exp(-expo)
    M0 = float(anchor.mean())
    # M_T carries 1 / phi_hat, so the error of phi_hat adds to the sample error
    se_sample = float(anchor.std(ddof=1)) / math.sqrt(P) if P > 1 else 0.0
    M0_se = math.hypot(se_sample, M0 * phi.phi_se / phi.phi)
    return MartingaleSolution(phi, M, psi_m, M0, M0_se, utility.x)


def pi_from_martingale(coeffs: CoefficientSet, y, v, z, psi_over_M) -> Array:
    """``(sigma*)^{-1} (theta + psi / M)``, shape ``(P, m)``."""
    require_complete(coeffs)
    mt = market_terms(coeffs, y, v, z)
    rhs = mt.theta + np.asarray(psi_over_M, dtype=float).reshape(mt.theta.shape)
    return np.linalg.solve(np.transpose(mt.sigma, (0, 2, 1)), rhs[..., None])[..., 0]


@dataclass
class Theorem41Report:
    eq20_relerr_q50_q95: tuple
    eq21_relerr_q50_q95: tuple
    pT_mean: float
    pT_se: float
    p0: float

    def as_dict(self) -> dict:
        return dict(eq20_relerr_q50_q95=list(self.eq20_relerr_q50_q95),
                    eq21_relerr_q50_q95=list(self.eq21_relerr_q50_q95),
                    pT_mean=self.pT_mean, pT_se=self.pT_se, p0=self.p0)


def check_theorem41(sol: MartingaleSolution, density: StateDensityPaths, factors: FactorPaths,
                    coeffs: CoefficientSet, utility: PowerUtility, wealth: Array,
                    q_hat: Array | None = None) -> Theorem41Report:
    """Pathwise checks of ``M = H0 X`` and ``p = p(0) H0^gamma (M / x)^{1 - gamma}``.

    ``p`` is run forward through the log-adjoint dynamics from
    ``p(0) = phi^{1 - gamma}`` (equal to ``Z(x)`` at ``x = 1``) with ``q_hat``
    taken from the martingale representation unless given.  Relative errors
    are pooled over all paths and times ``t > 0``.
    """
    g = utility.gamma
    H0 = density.H0
    rel20 = np.abs(H0 * wealth - sol.M) / sol.M

    if q_hat is None:
        q_hat = sol.q_hat(coeffs, g, factors)
    params = BsdeDriverParams(g)
    P, K, dt = factors.n_paths, factors.K, factors.dt
    p0 = sol.phi.phi ** (1.0 - g)
    log_p = np.empty((P, K + 1))
    log_p[:, 0] = math.log(p0)
    for k in range(K):
        mt = market_terms(coeffs, *factors.state(k))
        f = driver_f(params, mt, q_hat[:, k])
        log_p[:, k + 1] = log_p[:, k] - f * dt + np.sum(q_hat[:, k] * factors.dW[:, k], axis=1)
    closed = math.log(p0) + g * density.log_H0 + (1 - g) * np.log(sol.M / sol.x)
    rel21 = np.abs(np.expm1(log_p - closed))
    pT = np.exp(log_p[:, -1])
    # phi uncertainty enters p(0) multiplicatively
    se_sample = float(pT.std(ddof=1)) / math.sqrt(P)
    se_phi = (1 - g) * sol.phi.phi_se / sol.phi.phi * float(pT.mean())
    q = lambda a: (float(np.quantile(a[:, 1:], 0.5)), float(np.quantile(a[:, 1:], 0.95)))
    return Theorem41Report(q(rel20), q(rel21), float(pT.mean()),
                           math.hypot(se_sample, se_phi), p0)


__all__ = [
    "MartingaleSolution", "PhiEstimate", "StateDensityPaths", "Theorem41Report", "budget",
    "check_theorem41", "compute_phi_Zx", "estimate_M_and_psi", "pi_from_martingale",
    "simulate_H0",
]
