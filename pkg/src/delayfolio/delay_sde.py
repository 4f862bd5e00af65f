"""Euler-Maruyama simulation of the delayed factor system and of wealth.

The factor ``Y`` follows ``dY = b dt + sigma_F dW``.  The integral delay
``V(t) = int_{-delta}^0 e^{lam s} h(Y(t+s)) ds`` is carried as a state with an
exponential one-step integrator, and ``Z(t) = Y(t - delta)`` is read back from
the stored path (or from the pre-time-0 history).

Random numbers come from independent Philox streams, one per fixed-size block
of paths, keyed by ``(seed, block index)``.  Output is therefore identical for
any worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, MissingHistoryError, NonFiniteError
from .market_model import Array, CoefficientSet, DelaySpec, PowerUtility

BLOCK_SIZE = 512
V_TRUNCATION = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 = t_0 < ... < t_K = T``."""

    T: float
    K: int
    t0: float = 0.0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError(f"number of steps must be a positive integer, got {self.K}")
        if not self.T > self.t0:
            raise ConfigError(f"horizon T={self.T} must exceed t0={self.t0}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.K

    @property
    def times(self) -> Array:
        return self.t0 + self.dt * np.arange(self.K + 1)

    def delay_steps(self, delay: DelaySpec) -> tuple[int, float]:
        """Whole steps and fractional remainder of ``delta / dt``.

        Raises unless ``delta`` is a grid multiple or interpolation is enabled.
        """
        ratio = delay.delta / self.dt
        d = round(ratio)
        if abs(ratio - d) <= 1e-9 * max(1.0, ratio):
            return int(d), 0.0
        if not delay.interpolate:
            raise ConfigError(
                f"delta={delay.delta} is not an integer multiple of dt={self.dt} "
                f"(ratio {ratio:.6f}); enable delay interpolation or change the grid"
            )
        d = math.floor(ratio)
        return int(d), ratio - d


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------


def _block_normals(seed: int, block: int, size: int, K: int, N: int, antithetic: bool):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block,))
    rng = np.random.Generator(np.random.Philox(ss))
    if not antithetic:
        return rng.standard_normal((size, K, N))
    half = (size + 1) // 2
    g = rng.standard_normal((half, K, N))
    return np.concatenate([g, -g])[:size]


def brownian_increments(
    n_paths: int,
    K: int,
    N: int,
    dt: float,
    seed: int,
    workers: int = 1,
    antithetic: bool = False,
    first_block: int = 0,
) -> Array:
    """Brownian increments of shape ``(n_paths, K, N)``.

    Paths are grouped in blocks of ``BLOCK_SIZE``; each block owns a Philox
    stream keyed by ``(seed, block)``.  With ``antithetic`` the second half of
    each block mirrors the first.  ``first_block`` offsets the block index so a
    large path set can be generated chunk by chunk.
    """
    if n_paths < 1:
        raise ConfigError("n_paths must be positive")
    out = np.empty((n_paths, K, N))
    n_blocks = -(-n_paths // BLOCK_SIZE)
    scale = math.sqrt(dt)

    def fill(block):
        lo = block * BLOCK_SIZE
        hi = min(n_paths, lo + BLOCK_SIZE)
        out[lo:hi] = _block_normals(seed, first_block + block, hi - lo, K, N, antithetic) * scale

    _run(fill, range(n_blocks), workers)
    return out


def _run(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        for it in items:
            fn(it)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, items))


def path_slices(n_paths: int, workers: int) -> list[slice]:
    """Contiguous, block-aligned path ranges, one per worker."""
    n_blocks = -(-n_paths // BLOCK_SIZE)
    per = -(-n_blocks // max(1, workers))
    out = []
    for w in range(0, n_blocks, per):
        lo = w * BLOCK_SIZE
        out.append(slice(lo, min(n_paths, (w + per) * BLOCK_SIZE)))
    return out


# --------------------------------------------------------------------------
# factor paths
# --------------------------------------------------------------------------


@dataclass
class FactorPaths:
    """Simulated ``(Y, V, Z)`` with the Brownian increments that drove them."""

    t: Array  # (K+1,)
    Y: Array  # (P, K+1, n)
    V: Array  # (P, K+1)
    Z: Array  # (P, K+1, n); zeros when delta is infinite
    dW: Array  # (P, K, N)
    has_z: bool
    seed: int
    history: Callable | None = None  # s <= 0 -> Y(s)

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]

    @property
    def K(self) -> int:
        return len(self.t) - 1

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def state(self, k: int, idx=slice(None)):
        return self.Y[idx, k], self.V[idx, k], self.Z[idx, k]


def _check_history(delay: DelaySpec, hist, y0):
    h0 = hist(np.array([0.0]))[0]
    if not np.allclose(h0, y0, rtol=1e-12, atol=1e-12):
        raise ConfigError(f"history(0)={h0} differs from the initial factor {y0}")
    span = getattr(hist, "span", None)
    if span is not None:
        lo = -delay.delta if not delay.infinite else math.log(V_TRUNCATION) / delay.lam
        if span[0] > lo + 1e-12 or span[1] < -1e-12:
            raise MissingHistoryError(
                f"history covers [{span[0]}, {span[1]}], need [{lo:.6g}, 0]"
            )


def init_V(history, delay: DelaySpec, h: Callable, n_intervals: int = 4096) -> float:
    """``V(0) = int_{-delta}^0 e^{lam s} h(Y(s)) ds`` by the trapezoidal rule.

    For infinite delay the integral is truncated where ``e^{lam s} < 1e-12``.
    ``history`` maps an array of times ``s <= 0`` to factor values ``(len(s), n)``.
    """
    lo = -delay.delta if not delay.infinite else math.log(V_TRUNCATION) / delay.lam
    span = getattr(history, "span", None)
    if span is not None and (span[0] > lo + 1e-12 or span[1] < -1e-12):
        raise MissingHistoryError(f"history covers [{span[0]}, {span[1]}], need [{lo:.6g}, 0]")
    s = np.linspace(lo, 0.0, n_intervals + 1)
    vals = np.exp(delay.lam * s) * np.asarray(h(history(s)), dtype=float).reshape(-1)
    return float(np.trapezoid(vals, s) if hasattr(np, "trapezoid") else np.trapz(vals, s))


def simulate_factors(
    coeffs: CoefficientSet,
    delay: DelaySpec,
    grid: TimeGrid,
    y0,
    n_paths: int,
    seed: int,
    workers: int = 1,
    antithetic: bool = False,
    v0: float | None = None,
    dW: Array | None = None,
    first_block: int = 0,
) -> FactorPaths:
    """Euler-Maruyama paths of the factor system on ``grid``.

    ``V`` uses ``V_{k+1} = e^{-lam dt} V_k + dt/2 (e^{-lam dt} g_k + g_{k+1})``
    with ``g = h(Y) - e^{-lam delta} h(Z)``.  ``v0`` overrides the quadrature of
    the history; ``dW`` reuses given increments instead of drawing new ones.
    """
    dims = coeffs.dims
    n, N = dims.n_factors, dims.n_noise
    y0 = np.atleast_1d(np.asarray(y0, dtype=float)).reshape(n)
    K, dt, t = grid.K, grid.dt, grid.times
    if delay.infinite and coeffs.uses_z:
        raise ConfigError(
            f"family {coeffs.family!r} depends on the pointwise delay factor, "
            "which is undefined for infinite delay"
        )
    hist = delay.history_fn(y0)
    _check_history(delay, hist, y0)
    if v0 is None:
        v0 = init_V(hist, delay, coeffs.h)

    if dW is None:
        dW = brownian_increments(n_paths, K, N, dt, seed, workers, antithetic, first_block)
    elif dW.shape != (n_paths, K, N):
        raise ConfigError(f"dW has shape {dW.shape}, expected {(n_paths, K, N)}")

    Y = np.empty((n_paths, K + 1, n))
    V = np.empty((n_paths, K + 1))
    Z = np.zeros((n_paths, K + 1, n))
    Y[:, 0] = y0
    V[:, 0] = v0

    decay = math.exp(-delay.lam * dt)
    tail = 0.0 if delay.infinite else math.exp(-delay.lam * delay.delta)
    has_z = not delay.infinite
    if has_z:
        d, frac = grid.delay_steps(delay)
        s_hist = t - grid.t0 - delay.delta
        n_pre = int(np.count_nonzero(s_hist < -1e-12))
        hist_vals = hist(s_hist[:n_pre]) if n_pre else np.empty((0, n))
    else:
        d, frac, n_pre, hist_vals = 0, 0.0, 0, None

    def z_at(k, sl):
        if k < n_pre:
            return np.broadcast_to(hist_vals[k], Y[sl, k].shape)
        if frac == 0.0:
            return Y[sl, k - d]
        # t_k - delta lies between t_{k-d-1} and t_{k-d}
        return frac * Y[sl, k - d - 1] + (1.0 - frac) * Y[sl, k - d]

    def run(sl):
        for k in range(K + 1):
            if has_z:
                Z[sl, k] = z_at(k, sl)
            if k == K:
                break
            y, v, z = Y[sl, k], V[sl, k], Z[sl, k]
            drift = np.asarray(coeffs.b(y, v, z), dtype=float).reshape(-1, n)
            diff = np.asarray(coeffs.sigma_F(y, v, z), dtype=float).reshape(-1, n, N)
            ynew = y + drift * dt + np.einsum("pij,pj->pi", diff, dW[sl, k])
            Y[sl, k + 1] = ynew
            g_now = coeffs.h(y) - tail * coeffs.h(z) if has_z else coeffs.h(y)
            if has_z:
                Z[sl, k + 1] = z_at(k + 1, sl)
                g_next = coeffs.h(ynew) - tail * coeffs.h(Z[sl, k + 1])
            else:
                g_next = coeffs.h(ynew)
            V[sl, k + 1] = decay * v + 0.5 * dt * (decay * g_now + g_next)
            bad = ~(np.isfinite(V[sl, k + 1]) & np.all(np.isfinite(ynew), axis=1))
            if bad.any():
                raise NonFiniteError("factor", k + 1, sl.start + int(np.argmax(bad)))

    _run(run, path_slices(n_paths, workers), workers)
    return FactorPaths(t, Y, V, Z, dW, has_z, seed, hist)


def quadrature_V(paths: FactorPaths, delay: DelaySpec, h: Callable) -> Array:
    """Recompute ``V_k`` directly from the stored path and history (trapezoid).

    Only meant for finite delays; cost is ``O(P K d)``.
    """
    if delay.infinite:
        raise ConfigError("direct quadrature needs a finite delay")
    dt = paths.dt
    d = int(round(delay.delta / dt))
    if abs(delay.delta / dt - d) > 1e-9 * max(1.0, d):
        raise ConfigError("direct quadrature needs delta to be a grid multiple")
    P, K1, n = paths.Y.shape
    pre = paths.history(-dt * np.arange(d, 0, -1)) if d else np.empty((0, n))
    full = np.concatenate([np.broadcast_to(pre, (P, d, n)), paths.Y], axis=1)
    hv = np.stack([h(full[:, j]) for j in range(full.shape[1])], axis=1)
    w = np.exp(-delay.lam * dt * np.arange(d, -1, -1))
    w[0] *= 0.5
    w[-1] *= 0.5
    out = np.empty((P, K1))
    for k in range(K1):
        out[:, k] = dt * hv[:, k : k + d + 1] @ w
    return out


# --------------------------------------------------------------------------
# wealth
# --------------------------------------------------------------------------

Strategy = Callable[..., Array]
"""``strategy(k, t, y, v, z, idx) -> (P, m)``; ``idx`` selects the paths."""


def markov_strategy(fn: Callable) -> Strategy:
    """Wrap ``fn(t, y, v, z) -> (P, m)`` into the strategy call signature."""
    return lambda k, t, y, v, z, idx: fn(t, y, v, z)


def constant_strategy(pi) -> Strategy:
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    return lambda k, t, y, v, z, idx: np.broadcast_to(pi, (len(v), pi.size))


@dataclass
class WealthPaths:
    X: Array  # (P, K+1)
    Xtilde: Array  # (P, K+1)
    pi: Array  # (P, K+1, m)


def simulate_wealth(
    factors: FactorPaths,
    coeffs: CoefficientSet,
    utility: PowerUtility,
    strategy: Strategy,
    workers: int = 1,
) -> WealthPaths:
    """Log-Euler wealth under ``strategy`` using the factors' own increments.

    ``log X`` gains ``(r + pi*(mu - r1) - |sigma* pi|^2 / 2) dt + pi* sigma dW``
    each step, so ``X`` stays positive.
    """
    P, K = factors.n_paths, factors.K
    m = coeffs.dims.n_assets
    dt, t = factors.dt, factors.t
    logX = np.empty((P, K + 1))
    pis = np.empty((P, K + 1, m))
    logX[:, 0] = math.log(utility.x)

    def run(sl):
        for k in range(K + 1):
            y, v, z = factors.state(k, sl)
            pi = np.asarray(strategy(k, t[k], y, v, z, sl), dtype=float).reshape(-1, m)
            if not np.all(np.isfinite(pi)):
                bad = ~np.all(np.isfinite(pi), axis=1)
                raise NonFiniteError("strategy", k, sl.start + int(np.argmax(bad)))
            pis[sl, k] = pi
            if k == K:
                break
            r = np.asarray(coeffs.r(y, v, z), dtype=float).reshape(-1)
            mu = np.asarray(coeffs.mu(y, v, z), dtype=float).reshape(-1, m)
            sig = np.asarray(coeffs.sigma(y, v, z), dtype=float).reshape(len(r), m, -1)
            vol = np.einsum("pi,pij->pj", pi, sig)  # sigma* pi
            growth = r + np.einsum("pi,pi->p", pi, mu - r[:, None])
            growth -= 0.5 * np.einsum("pj,pj->p", vol, vol)
            logX[sl, k + 1] = logX[sl, k] + growth * dt + np.einsum(
                "pj,pj->p", vol, factors.dW[sl, k]
            )

    _run(run, path_slices(P, workers), workers)
    X = np.exp(logX)
    return WealthPaths(X, utility.U(X), pis)


# --------------------------------------------------------------------------
# CSV dump
# --------------------------------------------------------------------------


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_paths_csv(path, factors: FactorPaths, wealth: WealthPaths | None = None,
                    max_paths: int | None = None):
    """Rows ``t, path_id, Y.., V, Z.., X, Xtilde, pi..`` with a header row."""
    P = factors.n_paths if max_paths is None else min(max_paths, factors.n_paths)
    n = factors.Y.shape[2]
    m = wealth.pi.shape[2] if wealth is not None else 0
    header = (["t", "path_id"] + [f"Y{i + 1}" for i in range(n)] + ["V"]
              + [f"Z{i + 1}" for i in range(n)] + ["X", "Xtilde"]
              + [f"pi{i + 1}" for i in range(m)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p in range(P):
            for k, tk in enumerate(factors.t):
                z = factors.Z[p, k] if factors.has_z else [float("nan")] * n
                row = [fmt(tk), str(p)] + [fmt(a) for a in factors.Y[p, k]]
                row += [fmt(factors.V[p, k])] + [fmt(a) for a in z]
                if wealth is not None:
                    row += [fmt(wealth.X[p, k]), fmt(wealth.Xtilde[p, k])]
                    row += [fmt(a) for a in wealth.pi[p, k]]
                else:
                    row += ["", ""]
                w.writerow(row)
