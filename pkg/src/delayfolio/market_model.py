"""Market model: dimensions, delay parameters, coefficient families and utility.

All coefficient evaluators are vectorised over a batch of ``P`` factor states:

=========  ==============  =============
argument   shape           meaning
=========  ==============  =============
``y``      ``(P, n)``      current factor
``v``      ``(P,)``        integral delay factor
``z``      ``(P, n)``      pointwise delay factor
=========  ==============  =============

and return ``r: (P,)``, ``mu: (P, m)``, ``sigma: (P, m, N)``, ``b: (P, n)``,
``sigma_F: (P, n, N)`` and ``h(y): (P,)``.
"""

from __future__ import annotations

import inspect
import math
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConfigError, IncompleteMarketError, SingularMatrixError

COND_THRESHOLD = 1e12

Array = NDArray[np.float64]


@dataclass(frozen=True)
class ModelDims:
    """Numbers of assets ``m``, factors ``n`` and Brownian drivers ``N``."""

    n_assets: int
    n_factors: int
    n_noise: int

    def __post_init__(self):
        if not (1 <= self.n_assets <= self.n_noise):
            raise ConfigError(
                f"need 1 <= n_assets <= n_noise, got m={self.n_assets}, N={self.n_noise}"
            )
        if self.n_factors < 1:
            raise ConfigError(f"n_factors must be >= 1, got {self.n_factors}")

    @property
    def square(self) -> bool:
        return self.n_assets == self.n_noise


@dataclass(frozen=True)
class DelaySpec:
    """Delay parameters and the pre-time-0 factor history.

    ``history`` is ``None`` (constant extension ``Y(s) = y0``), a callable
    ``s -> Y(s)`` vectorised over an array of times (returning ``(len(s), n)``),
    or a pair ``(times, values)`` interpolated linearly.
    """

    lam: float
    delta: float
    history: Any = None
    interpolate: bool = False

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lambda must be positive and finite, got {self.lam}")
        if not self.delta > 0:
            raise ConfigError(f"delta must be positive, got {self.delta}")

    @property
    def infinite(self) -> bool:
        return math.isinf(self.delta)

    def history_fn(self, y0: ArrayLike) -> Callable[[Array], Array]:
        y0 = np.atleast_1d(np.asarray(y0, dtype=float))
        hist = self.history
        if hist is None:
            return lambda s: np.broadcast_to(y0, (np.size(s), y0.size)).copy()
        if callable(hist):
            return lambda s: np.asarray(hist(np.atleast_1d(s)), dtype=float).reshape(
                np.size(s), y0.size
            )
        times, values = hist
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float).reshape(times.size, -1)
        if values.shape[1] != y0.size:
            raise ConfigError("history values do not match the factor dimension")
        order = np.argsort(times)
        times, values = times[order], values[order]

        def interp(s):
            s = np.atleast_1d(np.asarray(s, dtype=float))
            return np.column_stack(
                [np.interp(s, times, values[:, j]) for j in range(values.shape[1])]
            )

        interp.span = (times[0], times[-1])
        return interp


@dataclass(frozen=True)
class PowerUtility:
    """``U(x) = x**gamma / gamma`` with ``0 < gamma < 1`` and initial wealth ``x``."""

    gamma: float
    x: float = 1.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.x > 0:
            raise ConfigError(f"initial wealth must be positive, got {self.x}")

    @property
    def gamma_tilde(self) -> float:
        return self.gamma / (1.0 - self.gamma)

    def U(self, x):
        return np.power(x, self.gamma) / self.gamma

    def U_inverse(self, u):
        return np.power(self.gamma * np.asarray(u, dtype=float), 1.0 / self.gamma)

    def marginal(self, x):
        return np.power(x, self.gamma - 1.0)

    def inverse_marginal(self, z):
        """``I = (U')^{-1}``, i.e. ``z ** (1 / (gamma - 1))``."""
        return np.power(z, 1.0 / (self.gamma - 1.0))


@dataclass(frozen=True)
class CoefficientSet:
    """Vectorised coefficient evaluators plus provenance of the family."""

    dims: ModelDims
    r: Callable
    mu: Callable
    sigma: Callable
    b: Callable
    sigma_F: Callable
    h: Callable
    uses_z: bool = True
    family: str = "custom"
    params: dict = field(default_factory=dict)


class MarketTerms(NamedTuple):
    r: Array  # (P,)
    excess: Array  # (P, m)  mu - r 1
    sigma: Array  # (P, m, N)
    theta: Array  # (P, N)
    proj: Array  # (P, N, N)
    cond: Array  # (P,)


class StrategyTerms(NamedTuple):
    """Optimal strategy split into the myopic (Merton) and hedging demands."""

    merton: Array
    hedging: Array

    @property
    def total(self) -> Array:
        return self.merton + self.hedging


def as_batch(y, v, z, dims: ModelDims):
    """Promote a single state or a batch to ``(P, n), (P,), (P, n)`` arrays."""
    y = np.asarray(y, dtype=float)
    n = dims.n_factors
    if y.ndim <= 1:
        y = y.reshape(-1, n)
    P = y.shape[0]
    v = np.broadcast_to(np.asarray(v, dtype=float).reshape(-1), (P,))
    if z is None:
        z = np.zeros_like(y)
    else:
        z = np.asarray(z, dtype=float)
        z = np.broadcast_to(z.reshape(-1, n), (P, n))
    return y, v, z


def _condition(sst: Array) -> Array:
    """2-norm condition numbers of symmetric PSD matrices, ``inf`` when singular."""
    if sst.shape[1] == 1:
        return np.where(sst[:, 0, 0] > 0, 1.0, np.inf)
    eig = np.linalg.eigvalsh(sst)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = eig[:, -1] / eig[:, 0]
    return np.where((eig[:, 0] > 0) & np.isfinite(cond), cond, np.inf)


def _gram(sigma: Array, threshold: float) -> tuple[Array, Array]:
    sst = np.einsum("pij,pkj->pik", sigma, sigma)
    cond = _condition(sst)
    worst = int(np.argmax(cond))
    if cond[worst] > threshold:
        raise SingularMatrixError(
            f"sigma sigma* singular at state {worst} (cond={cond[worst]:.3g})",
            cond=float(cond[worst]),
        )
    return sst, cond


def market_terms(coeffs: CoefficientSet, y, v, z, cond_threshold=COND_THRESHOLD):
    """Evaluate r, mu - r1, sigma, theta and the projection sigma~ in one pass."""
    y, v, z = as_batch(y, v, z, coeffs.dims)
    m, N = coeffs.dims.n_assets, coeffs.dims.n_noise
    r = np.asarray(coeffs.r(y, v, z), dtype=float).reshape(-1)
    P = len(r)
    mu = np.asarray(coeffs.mu(y, v, z), dtype=float).reshape(P, m)
    sigma = np.asarray(coeffs.sigma(y, v, z), dtype=float).reshape(P, m, N)
    excess = mu - r[:, None]
    sst, cond = _gram(sigma, cond_threshold)
    # one batched solve for [mu - r1 | sigma]
    rhs = np.concatenate([excess[..., None], sigma], axis=2)
    sol = rhs / sst if m == 1 else np.linalg.solve(sst, rhs)
    theta = np.einsum("pij,pi->pj", sigma, sol[:, :, 0])
    proj = np.einsum("pij,pik->pjk", sigma, sol[:, :, 1:])
    return MarketTerms(r, excess, sigma, theta, proj, cond)


def eval_theta(coeffs: CoefficientSet, y, v, z=None, cond_threshold=COND_THRESHOLD):
    """Market price of risk ``sigma* (sigma sigma*)^{-1} (mu - r 1)``, shape ``(P, N)``."""
    return market_terms(coeffs, y, v, z, cond_threshold).theta


def eval_projection(coeffs: CoefficientSet, y, v, z=None, cond_threshold=COND_THRESHOLD):
    """Orthogonal projection ``sigma* (sigma sigma*)^{-1} sigma`` onto the row space of sigma."""
    return market_terms(coeffs, y, v, z, cond_threshold).proj


@dataclass
class AssumptionReport:
    n_states: int
    min_r: float
    max_cond: float
    lipschitz: dict[str, float]
    flags: list[str]

    @property
    def passed(self) -> bool:
        return not self.flags


def check_assumptions(
    coeffs: CoefficientSet,
    y,
    v,
    z=None,
    cond_threshold: float = COND_THRESHOLD,
    fd_step: float = 1e-5,
    lipschitz_bound: float | None = None,
) -> AssumptionReport:
    """Probe the standing assumptions numerically on a sample of states.

    Reports the minimum interest rate, the worst condition number of
    ``sigma sigma*`` and finite-difference slopes of every coefficient.  Never
    raises; violations are listed in ``flags``.
    """
    y, v, z = as_batch(y, v, z, coeffs.dims)
    if len(v) == 0:
        raise ValueError("need at least one state")
    flags = []
    r = np.asarray(coeffs.r(y, v, z), dtype=float).reshape(-1)
    min_r = float(np.min(r))
    if min_r < 0:
        flags.append("r_negative")
    if not np.all(np.isfinite(r)):
        flags.append("r_nonfinite")

    sigma = np.asarray(coeffs.sigma(y, v, z), dtype=float).reshape(
        len(v), coeffs.dims.n_assets, coeffs.dims.n_noise
    )
    cond = _condition(np.einsum("pij,pkj->pik", sigma, sigma))
    max_cond = float(np.max(cond))
    if max_cond > cond_threshold:
        flags.append("sigma_ill_conditioned")

    def _flat(fn, yy, vv, zz):
        return np.asarray(fn(yy, vv, zz), dtype=float).reshape(len(vv), -1)

    evaluators = {
        "r": coeffs.r,
        "mu": coeffs.mu,
        "sigma": coeffs.sigma,
        "b": coeffs.b,
        "sigma_F": coeffs.sigma_F,
        "h": lambda yy, vv, zz: coeffs.h(yy),
    }
    lipschitz = {}
    for name, fn in evaluators.items():
        base = _flat(fn, y, v, z)
        slope = 0.0
        for j in range(y.shape[1]):
            dy = y.copy()
            dy[:, j] += fd_step
            slope = max(slope, float(np.max(np.abs(_flat(fn, dy, v, z) - base))) / fd_step)
            if coeffs.uses_z:
                dz = z.copy()
                dz[:, j] += fd_step
                slope = max(
                    slope, float(np.max(np.abs(_flat(fn, y, v, dz) - base))) / fd_step
                )
        slope = max(
            slope, float(np.max(np.abs(_flat(fn, y, v + fd_step, z) - base))) / fd_step
        )
        lipschitz[name] = slope
        if lipschitz_bound is not None and slope > lipschitz_bound:
            flags.append(f"{name}_lipschitz")
    return AssumptionReport(len(v), min_r, max_cond, lipschitz, flags)


def sample_states(dims: ModelDims, low: float, high: float, n: int, seed: int = 0):
    """Uniform states in the box ``[low, high]`` for assumption probing."""
    rng = np.random.default_rng(seed)
    y = rng.uniform(low, high, (n, dims.n_factors))
    v = rng.uniform(low, high, n)
    z = rng.uniform(low, high, (n, dims.n_factors))
    return y, v, z


# --------------------------------------------------------------------------
# Coefficient families
# --------------------------------------------------------------------------

_FAMILIES: dict[str, Callable[..., CoefficientSet]] = {}


def register_family(name: str):
    """Decorator registering a coefficient-family builder under ``name``.

    A builder is called as ``builder(dims, gamma, **params)`` and returns a
    :class:`CoefficientSet`.
    """

    def deco(fn):
        _FAMILIES[name] = fn
        return fn

    return deco


def families() -> list[str]:
    return sorted(_FAMILIES)


def build_coefficients(family: str, dims: ModelDims, gamma: float, params: dict):
    try:
        builder = _FAMILIES[family]
    except KeyError:
        raise ConfigError(f"unknown coefficient family {family!r}; known: {families()}")
    sig = inspect.signature(builder)
    accepted = [p for p in sig.parameters if p not in ("dims", "gamma")]
    unknown = sorted(set(params) - set(accepted))
    if unknown:
        raise ConfigError(f"unknown parameters for family {family!r}: {unknown}")
    try:
        return builder(dims, gamma, **params)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"family {family!r}: {exc}") from exc


def _vec(x, size, name):
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.size == 1 and size > 1:
        a = np.full(size, a[0])
    if a.size != size:
        raise ConfigError(f"{name} must have {size} entries, got {a.size}")
    return a


def _mat(x, shape, name):
    a = np.asarray(x, dtype=float)
    if a.size == 1 and shape != (1, 1):
        a = np.full(shape, float(a.reshape(-1)[0]))
    try:
        return a.reshape(shape)
    except ValueError:
        raise ConfigError(f"{name} must have shape {shape}, got {a.shape}") from None


def _h_linear(dims, weights, offset):
    w = _vec(weights if weights is not None else np.eye(dims.n_factors)[0],
             dims.n_factors, "h_weights")
    return lambda y: offset + y @ w


@register_family("constant")
def constant_family(dims, gamma, r=0.0, mu=0.0, sigma=None, b=0.0, sigma_F=0.0,
                    h_weights=None, h_offset=0.0):
    m, n, N = dims.n_assets, dims.n_factors, dims.n_noise
    r0 = float(r)
    mu0 = _vec(mu, m, "mu")
    s0 = _mat(np.eye(m, N) if sigma is None else sigma, (m, N), "sigma")
    b0 = _vec(b, n, "b")
    sf = _mat(sigma_F, (n, N), "sigma_F")

    return CoefficientSet(
        dims=dims,
        r=lambda y, v, z: np.full(len(v), r0),
        mu=lambda y, v, z: np.broadcast_to(mu0, (len(v), m)),
        sigma=lambda y, v, z: np.broadcast_to(s0, (len(v), m, N)),
        b=lambda y, v, z: np.broadcast_to(b0, (len(v), n)),
        sigma_F=lambda y, v, z: np.broadcast_to(sf, (len(v), n, N)),
        h=_h_linear(dims, h_weights, h_offset),
        uses_z=False,
        family="constant",
        params=dict(r=r, mu=mu, sigma=sigma, b=b, sigma_F=sigma_F),
    )


@register_family("affine")
def affine_family(dims, gamma, r0=0.0, r_y=0.0, r_v=0.0, r_z=0.0,
                  mu0=0.0, mu_y=0.0, mu_v=0.0, mu_z=0.0, sigma=None,
                  b0=0.0, b_y=0.0, b_v=0.0, b_z=0.0, sigma_F=0.0,
                  h_weights=None, h_offset=0.0):
    """Coefficients affine in ``(y, v, z)``; ``sigma`` and ``sigma_F`` constant."""
    m, n, N = dims.n_assets, dims.n_factors, dims.n_noise
    ry, rz = _vec(r_y, n, "r_y"), _vec(r_z, n, "r_z")
    m0, my, mv, mz = (_vec(mu0, m, "mu0"), _mat(mu_y, (m, n), "mu_y"),
                      _vec(mu_v, m, "mu_v"), _mat(mu_z, (m, n), "mu_z"))
    s0 = _mat(np.eye(m, N) if sigma is None else sigma, (m, N), "sigma")
    bb0, by, bv, bz = (_vec(b0, n, "b0"), _mat(b_y, (n, n), "b_y"),
                       _vec(b_v, n, "b_v"), _mat(b_z, (n, n), "b_z"))
    sf = _mat(sigma_F, (n, N), "sigma_F")
    uses_z = bool(np.any(rz) or np.any(mz) or np.any(bz))

    return CoefficientSet(
        dims=dims,
        r=lambda y, v, z: r0 + y @ ry + r_v * v + z @ rz,
        mu=lambda y, v, z: m0 + y @ my.T + v[:, None] * mv + z @ mz.T,
        sigma=lambda y, v, z: np.broadcast_to(s0, (len(v), m, N)),
        b=lambda y, v, z: bb0 + y @ by.T + v[:, None] * bv + z @ bz.T,
        sigma_F=lambda y, v, z: np.broadcast_to(sf, (len(v), n, N)),
        h=_h_linear(dims, h_weights, h_offset),
        uses_z=uses_z,
        family="affine",
        params={},
    )


def _require_scalar_dims(dims, family):
    if (dims.n_assets, dims.n_factors, dims.n_noise) != (1, 1, 1):
        raise ConfigError(f"family {family!r} requires m = n = N = 1")


@register_family("lq_infinite")
def lq_infinite_family(dims, gamma, alpha, beta, sigma_F=1.0, sigma=0.2, theta=0.0):
    """Infinite-delay linear-quadratic family.

    Built so that ``b + gamma~ theta sigma_F = a1 y + a2 v`` and
    ``gamma r + gamma~ theta^2 / 2 = b1 y^2 + b2 v^2`` with constant
    ``theta``; ``h(y) = y``.  The implied rate may be negative.
    """
    _require_scalar_dims(dims, "lq_infinite")
    a1, a2 = _vec(alpha, 2, "alpha")
    b1, b2 = _vec(beta, 2, "beta")
    gt = gamma / (1.0 - gamma)
    sf, s, th = float(sigma_F), float(sigma), float(theta)
    if s == 0:
        raise ConfigError("sigma must be non-zero")

    def r(y, v, z):
        return (b1 * y[:, 0] ** 2 + b2 * v**2 - 0.5 * gt * th**2) / gamma

    return CoefficientSet(
        dims=dims,
        r=r,
        mu=lambda y, v, z: (r(y, v, z) + s * th)[:, None],
        sigma=lambda y, v, z: np.full((len(v), 1, 1), s),
        b=lambda y, v, z: (a1 * y[:, 0] + a2 * v - gt * th * sf)[:, None],
        sigma_F=lambda y, v, z: np.full((len(v), 1, 1), sf),
        h=lambda y: y[:, 0],
        uses_z=False,
        family="lq_infinite",
        params=dict(alpha=[a1, a2], beta=[b1, b2], sigma_F=sf, sigma=s, theta=th),
    )


@register_family("lq_pointwise")
def lq_pointwise_family(dims, gamma, alpha, beta, sigma_F=1.0, sigma=0.2, theta=0.0):
    """Pointwise-delay linear family.

    ``b + gamma~ theta sigma_F = a1 y + a2 v + a3 z`` and
    ``gamma r + gamma~ theta^2 / 2 = b1 y + b2 v + b3 z``; ``h(y) = y``.
    """
    _require_scalar_dims(dims, "lq_pointwise")
    a1, a2, a3 = _vec(alpha, 3, "alpha")
    b1, b2, b3 = _vec(beta, 3, "beta")
    gt = gamma / (1.0 - gamma)
    sf, s, th = float(sigma_F), float(sigma), float(theta)
    if s == 0:
        raise ConfigError("sigma must be non-zero")

    def r(y, v, z):
        return (b1 * y[:, 0] + b2 * v + b3 * z[:, 0] - 0.5 * gt * th**2) / gamma

    return CoefficientSet(
        dims=dims,
        r=r,
        mu=lambda y, v, z: (r(y, v, z) + s * th)[:, None],
        sigma=lambda y, v, z: np.full((len(v), 1, 1), s),
        b=lambda y, v, z: (a1 * y[:, 0] + a2 * v + a3 * z[:, 0] - gt * th * sf)[:, None],
        sigma_F=lambda y, v, z: np.full((len(v), 1, 1), sf),
        h=lambda y: y[:, 0],
        uses_z=True,
        family="lq_pointwise",
        params=dict(alpha=[a1, a2, a3], beta=[b1, b2, b3], sigma_F=sf, sigma=s, theta=th),
    )


def require_complete(coeffs: CoefficientSet):
    if not coeffs.dims.square:
        raise IncompleteMarketError(
            f"complete market required (m == N), got m={coeffs.dims.n_assets}, "
            f"N={coeffs.dims.n_noise}"
        )


__all__ = [
    "AssumptionReport", "CoefficientSet", "DelaySpec", "MarketTerms",
    "ModelDims", "PowerUtility", "StrategyTerms", "as_batch", "build_coefficients", "check_assumptions",
    "eval_projection", "eval_theta", "families", "market_terms", "register_family",
    "require_complete", "sample_states",
]
