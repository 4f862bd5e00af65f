"""Statistical checks of the optimality structure.

All Monte Carlo tests use a 3-standard-error band.  Reports carry the seed,
path count and step size needed to reproduce them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

from .delay_sde import FactorPaths, Strategy, simulate_wealth
from .market_model import Array, CoefficientSet, PowerUtility, market_terms
from .regression import BasisSpec, FittedBasis

SE_BAND = 3.0
WALD_LEVEL = 0.0027  # two-sided 3-sigma


@dataclass
class TestReport:
    name: str
    statistic: float
    tolerance: float
    passed: bool
    n_paths: int = 0
    seed: int | None = None
    dt: float | None = None
    details: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def as_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _se(a: Array) -> float:
    return float(np.std(a, ddof=1)) / math.sqrt(len(a)) if len(a) > 1 else 0.0


def _z(diff: float, se: float) -> float:
    if se == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / se


# --------------------------------------------------------------------------
# Hamiltonian
# --------------------------------------------------------------------------


def eval_hamiltonian(utility: PowerUtility, coeffs: CoefficientSet, y, v, z, pi, xt, p, q) -> Array:
    """``gamma x~ {(r + pi*(mu - r1) - (1 - gamma) |sigma* pi|^2 / 2) p + pi* sigma q}``."""
    mt = market_terms(coeffs, y, v, z)
    P, m, N = mt.sigma.shape
    pi = np.asarray(pi, dtype=float).reshape(P, m)
    q = np.asarray(q, dtype=float).reshape(P, N)
    vol = np.einsum("pi,pij->pj", pi, mt.sigma)
    growth = mt.r + np.sum(pi * mt.excess, axis=1) - 0.5 * (1 - utility.gamma) * np.sum(vol**2, axis=1)
    return utility.gamma * np.asarray(xt) * (growth * np.asarray(p) + np.sum(vol * q, axis=1))


def analytic_argmax(utility: PowerUtility, coeffs: CoefficientSet, y, v, z, p, q) -> Array:
    """First-order-condition maximiser ``(sigma sigma*)^{-1}(mu - r1 + sigma q / p) / (1 - gamma)``."""
    mt = market_terms(coeffs, y, v, z)
    P, m, N = mt.sigma.shape
    q = np.asarray(q, dtype=float).reshape(P, N) / np.asarray(p, dtype=float).reshape(P, 1)
    sst = np.einsum("pij,pkj->pik", mt.sigma, mt.sigma)
    rhs = mt.excess + np.einsum("pij,pj->pi", mt.sigma, q)
    return np.linalg.solve(sst, rhs[..., None])[..., 0] / (1 - utility.gamma)


def _fd_newton(fun, x, steps: int = 3) -> Array:
    """Newton steps with central-difference gradient and Hessian of ``fun``."""
    m = x.size
    for _ in range(steps):
        h = 1e-3 * max(1.0, float(np.max(np.abs(x))))
        e = np.eye(m) * h
        f0 = fun(x)
        grad = np.array([(fun(x + e[i]) - fun(x - e[i])) / (2 * h) for i in range(m)])
        hess = np.empty((m, m))
        for i in range(m):
            for j in range(i, m):
                hess[i, j] = hess[j, i] = (fun(x + e[i] + e[j]) - fun(x + e[i] - e[j])
                                           - fun(x - e[i] + e[j]) + fun(x - e[i] - e[j])) / (4 * h * h)
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        x = x - step
        if fun(x) > f0:  # guard against a bad finite-difference model
            x = x + step
            break
    return x


def argmax_check(utility: PowerUtility, coeffs: CoefficientSet, y, v, z, p, q,
                 tol: float = 1e-6) -> TestReport:
    """Compare the analytic maximiser with a derivative-free numerical search on ``H``.

    Powell's direction-set search locates the maximum and Newton steps on
    finite-difference derivatives polish it, so the first-order condition is
    never used.  The statistic is the max-abs difference divided by
    ``max(1, |pi_analytic|)``.
    """
    analytic = analytic_argmax(utility, coeffs, y, v, z, p, q)[0]
    m = analytic.size

    def neg_h(x):
        return -float(eval_hamiltonian(utility, coeffs, y, v, z, x[None, :], 1.0, p, q)[0])

    res = optimize.minimize(neg_h, np.zeros(m), method="Powell",
                            options={"xtol": 1e-10, "ftol": 1e-14, "maxiter": 20 * m})
    numeric = _fd_newton(neg_h, res.x)
    # relative once the maximiser is large, as for nearly singular sigma sigma*
    diff = float(np.max(np.abs(numeric - analytic))) / max(1.0, float(np.max(np.abs(analytic))))
    return TestReport("argmax", diff, tol, diff <= tol,
                      details=dict(analytic=analytic, numeric=numeric, powell=res.x))


# --------------------------------------------------------------------------
# martingale / supermartingale
# --------------------------------------------------------------------------


def check_indices(K: int, n_times: int = 5) -> list[int]:
    """``n_times`` grid indices spread over ``(0, K]``."""
    return sorted({int(round(K * (j + 1) / n_times)) for j in range(n_times)})


def adjoint_product(xtilde: Array, p_hat: Array) -> Array:
    """``X~ p`` with ``p = exp(p_hat)``."""
    return xtilde * np.exp(p_hat)


def _increment_wald(prod: Array, factors: FactorPaths | None, k0: int, k1: int,
                    basis: BasisSpec) -> float:
    """p-value of a robust Wald test that relative increments are unpredictable."""
    # paths whose product underflowed to zero carry no relative information
    keep = (prod[:, k0] > 0) & np.isfinite(prod[:, k0]) & np.isfinite(prod[:, k1])
    rel = prod[keep, k1] / prod[keep, k0] - 1.0
    if factors is None:
        design = np.ones((len(rel), 1))
    else:
        y, v, z = factors.state(k0, keep)
        x = np.concatenate([y, v[:, None]] + ([z] if factors.has_z else []), axis=1)
        design = FittedBasis.fit(x, basis).design(x)
    if len(rel) <= design.shape[1] or not np.any(rel):
        return 1.0
    coef, *_ = np.linalg.lstsq(design, rel, rcond=None)
    resid = rel - design @ coef
    bread = np.linalg.pinv(design.T @ design)
    meat = (design * resid[:, None] ** 2).T @ design
    cov = bread @ meat @ bread
    stat = float(coef @ np.linalg.pinv(cov) @ coef)
    return float(stats.chi2.sf(stat, design.shape[1]))


def martingale_test(prod: Array, target: float, factors: FactorPaths | None = None,
                    n_times: int = 5, basis: BasisSpec = BasisSpec(degree=1),
                    seed: int | None = None, name: str = "martingale",
                    strict_increments: bool = False) -> TestReport:
    """``E[X~(t_j) p(t_j)] = U(x) p(0)`` at ``n_times`` grid times.

    The statistic is the largest ``|mean - target| / SE``.  A robust Wald test
    on the relative increments between check times is always reported; it
    gates the result only with ``strict_increments``, since with many paths it
    also detects the O(dt) bias of the time stepping.
    """
    K = prod.shape[1] - 1
    idx = check_indices(K, n_times)
    z_scores, means, ses = [], [], []
    for k in idx:
        mean, se = float(prod[:, k].mean()), _se(prod[:, k])
        means.append(mean)
        ses.append(se)
        z_scores.append(abs(_z(mean - target, se)))
    stat = max(z_scores)
    bounds = [0] + idx
    pvals = [_increment_wald(prod, factors, a, b, basis) for a, b in zip(bounds[:-1], bounds[1:])]
    ok_mean = stat <= SE_BAND
    ok_incr = min(pvals) >= WALD_LEVEL
    dt = 1.0 / K if factors is None else factors.dt
    return TestReport(name, stat, SE_BAND, bool(ok_mean and (ok_incr or not strict_increments)), prod.shape[0],
                      seed if factors is None else factors.seed, dt,
                      dict(times=idx, means=means, ses=ses, target=target,
                           increment_pvalues=pvals, mean_pass=ok_mean, increment_pass=ok_incr))


def supermartingale_test(prod: Array, n_times: int = 5, seed: int | None = None,
                         dt: float | None = None, name: str = "supermartingale") -> TestReport:
    """``E[G(t_{j+1})] <= E[G(t_j)] + 3 SE`` over consecutive check times (paired)."""
    K = prod.shape[1] - 1
    idx = [0] + check_indices(K, n_times)
    zs, diffs = [], []
    for a, b in zip(idx[:-1], idx[1:]):
        d = prod[:, b] - prod[:, a]
        diffs.append(float(d.mean()))
        zs.append(_z(float(d.mean()), _se(d)))
    stat = max(zs)
    return TestReport(name, stat, SE_BAND, stat <= SE_BAND, prod.shape[0], seed, dt,
                      dict(times=idx, mean_differences=diffs, z_scores=zs))


# --------------------------------------------------------------------------
# utility dominance
# --------------------------------------------------------------------------


def perturbed_strategies(base: Strategy, eps=(0.25, -0.25, 0.5, -0.5), n: int = 10,
                         seed: int = 0, T: float = 1.0) -> dict[str, Strategy]:
    """``base + eps cos(omega t + phase)`` with random frequencies and phases."""
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n):
        e = eps[i % len(eps)]
        omega = rng.uniform(0.0, 2 * math.pi / T)
        phase = rng.uniform(0.0, 2 * math.pi)

        def strat(k, t, y, v, z, idx, e=e, omega=omega, phase=phase):
            return base(k, t, y, v, z, idx) + e * math.cos(omega * t + phase)

        out[f"eps={e:+.2f},omega={omega:.3f},phase={phase:.3f}"] = strat
    return out


def utility_dominance_test(factors: FactorPaths, coeffs: CoefficientSet, utility: PowerUtility,
                           optimal: Strategy, candidates: dict[str, Strategy],
                           value: float | None = None, workers: int = 1) -> TestReport:
    """Paired test that no candidate beats the optimal strategy by more than 3 SE.

    All strategies run on the same Brownian increments.  If ``value`` is given,
    ``E[U(X^opt(T))]`` is also checked against it.
    """
    best = simulate_wealth(factors, coeffs, utility, optimal, workers).Xtilde[:, -1]
    z_scores = {}
    for name, strat in candidates.items():
        d = simulate_wealth(factors, coeffs, utility, strat, workers).Xtilde[:, -1] - best
        z_scores[name] = _z(float(d.mean()), _se(d))
    stat = max(z_scores.values()) if z_scores else -math.inf
    ok = stat <= SE_BAND
    details = dict(z_scores=z_scores, optimal_mean=float(best.mean()), optimal_se=_se(best))
    if value is not None:
        vz = abs(_z(float(best.mean()) - value, _se(best)))
        details.update(value=value, value_z=vz)
        ok = ok and vz <= SE_BAND
    return TestReport("utility_dominance", stat, SE_BAND, bool(ok), factors.n_paths,
                      factors.seed, factors.dt, details)


__all__ = [
    "TestReport", "adjoint_product", "analytic_argmax", "argmax_check", "check_indices",
    "eval_hamiltonian", "martingale_test", "perturbed_strategies", "supermartingale_test",
    "utility_dominance_test",
]
