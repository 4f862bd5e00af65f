"""Command-line entry point.

Every run writes ``manifest.json`` into the output directory, including runs
that fail.  Exit codes: 0 success, 1 verification failure, 2 configuration
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass
from importlib import metadata

import numpy as np

from .closed_form import (
    CONVENTIONS,
    LqParams,
    check_pointwise_constraints,
    eta_lq,
    optimal_pi_infinite,
    pointwise_pi,
    pointwise_solution,
    solve_riccati,
)
from .config import RunConfig, load_config
from .delay_sde import (
    FactorPaths,
    Strategy,
    TimeGrid,
    constant_strategy,
    fmt,
    init_V,
    markov_strategy,
    simulate_factors,
    simulate_wealth,
    write_paths_csv,
)
from .errors import ConfigError, ConstraintError, DelayfolioError, MissingHistoryError, NumericalError
from .fbsde_solver import contraction_diagnostics, lsmc_solve, optimal_pi_from_qhat, value_at_zero
from .market_model import market_terms
from .martingale_method import check_theorem41, estimate_M_and_psi, simulate_H0
from .regression import BasisSpec
from .verify import (
    TestReport,
    adjoint_product,
    argmax_check,
    martingale_test,
    perturbed_strategies,
    supermartingale_test,
    utility_dominance_test,
)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("simulate", "riccati", "pointwise", "lsmc", "martingale", "verify", "figure1")

# parameters of the `figure1` command: alpha = (1, 1), beta = (-2, -2), lambda = 1, sigma_F = 1, gamma = 0.5, T = 1
FIGURE1 = LqParams(alpha=(1.0, 1.0), beta=(-2.0, -2.0), sigma_F=1.0, lam=1.0, gamma=0.5, T=1.0)
FIGURE1_STEPS = 1000


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in row])


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("delayfolio", "numpy", "scipy", "pyyaml"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


@dataclass
class Outcome:
    files: list
    exit_code: int = EXIT_OK


# --------------------------------------------------------------------------
# shared pieces
# --------------------------------------------------------------------------


def _initial_v(cfg: RunConfig) -> float:
    if cfg.v0 is not None:
        return cfg.v0
    return init_V(cfg.delay.history_fn(cfg.y0), cfg.delay, cfg.coeffs.h)


def _factors(cfg: RunConfig) -> FactorPaths:
    return simulate_factors(cfg.coeffs, cfg.delay, cfg.grid, cfg.y0, cfg.n_paths, cfg.seed,
                            workers=cfg.workers, antithetic=cfg.antithetic, v0=cfg.v0)


def _lq(cfg: RunConfig, family: str) -> LqParams:
    if cfg.coeffs.family != family:
        raise ConfigError(f"this subcommand needs model.family = {family!r}, got {cfg.coeffs.family!r}")
    return cfg.lq


def _myopic(cfg: RunConfig) -> Strategy:
    g = cfg.utility.gamma

    def pi(t, y, v, z):
        return optimal_pi_from_qhat(cfg.coeffs, g, y, v, z, np.zeros((len(v), cfg.dims.n_noise))).total

    return markov_strategy(pi)


def _riccati_steps(cfg: RunConfig) -> int:
    # the Riccati grid is at least as fine as the simulation grid
    return max(FIGURE1_STEPS, cfg.grid.K)


@dataclass
class OptimalPlan:
    """Optimal strategy with its log-adjoint along simulated paths."""

    method: str
    factors: FactorPaths
    strategy: Strategy
    p_hat: np.ndarray  # (P, K+1)
    q_hat: np.ndarray  # (P, K, N)
    p_hat0: float


def optimal_plan(cfg: RunConfig) -> OptimalPlan:
    """Closed form for the LQ families when it is the adjoint, otherwise LSMC."""
    c, g = cfg.coeffs, cfg.utility.gamma
    lq = cfg.lq
    if lq is not None and lq.pointwise:
        sol = pointwise_solution(lq)
        if sol.terminal_consistent:
            f = _factors(cfg)
            K = f.K
            p = np.stack([sol.p_hat(f.t[k], f.Y[:, k, 0], f.V[:, k]) for k in range(K + 1)], axis=1)
            q = np.stack([np.full(f.n_paths, sol.q_hat(f.t[k])) for k in range(K)], axis=1)[..., None]
            strat = markov_strategy(lambda t, y, v, z: pointwise_pi(sol, c, t, y, v, z).total[:, None])
            return OptimalPlan("pointwise_closed_form", f, strat, p, q, float(p[0, 0]))
    if lq is not None and not lq.pointwise:
        sol = solve_riccati(lq, _riccati_steps(cfg))
        f = _factors(cfg)
        K = f.K
        p = np.empty((f.n_paths, K + 1))
        q = np.empty((f.n_paths, K, 1))
        sf = float(lq.sigma_F)
        for k in range(K + 1):
            eta, grad = eta_lq(sol, f.t[k], f.Y[:, k, 0], f.V[:, k])
            p[:, k] = eta
            if k < K:
                q[:, k, 0] = sf * grad
        strat = markov_strategy(
            lambda t, y, v, z: optimal_pi_infinite(sol, c, t, y[:, 0], v).total[:, None])
        return OptimalPlan("riccati", f, strat, p, q, float(p[0, 0]))
    s = lsmc_solve(c, cfg.delay, cfg.utility, cfg.grid, cfg.y0, BasisSpec(cfg.basis_degree),
                   cfg.n_paths, cfg.picard, cfg.seed, cfg.clip, cfg.workers, cfg.antithetic)
    return OptimalPlan("lsmc", s.factors, s.strategy(), s.p_paths, s.q_paths, s.p_hat0)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: str) -> Outcome:
    opts = cfg.commands["simulate"]
    kind = opts["strategy"]
    if kind == "zero":
        strat = constant_strategy(np.zeros(cfg.dims.n_assets))
    elif kind == "constant":
        if opts["pi"] is None:
            raise ConfigError("simulate.strategy = constant needs simulate.pi")
        pi = np.atleast_1d(np.asarray(opts["pi"], dtype=float))
        if pi.shape != (cfg.dims.n_assets,):
            raise ConfigError(f"simulate.pi must have {cfg.dims.n_assets} entries")
        strat = constant_strategy(pi)
    elif kind == "myopic":
        strat = _myopic(cfg)
    else:
        raise ConfigError(f"simulate.strategy must be zero, constant or myopic, got {kind!r}")
    f = _factors(cfg)
    w = simulate_wealth(f, cfg.coeffs, cfg.utility, strat, cfg.workers)
    paths_file = os.path.join(out, "paths.csv")
    write_paths_csv(paths_file, f, w, max_paths=int(opts["dump_paths"]))
    xt, ut = w.X[:, -1], w.Xtilde[:, -1]
    se = lambda a: float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    summary = dict(n_paths=f.n_paths, steps=f.K, dt=f.dt, seed=cfg.seed, strategy=kind,
                   mean_X_T=float(xt.mean()), se_X_T=se(xt), min_X=float(w.X.min()),
                   mean_U_T=float(ut.mean()), se_U_T=se(ut))
    sum_file = os.path.join(out, "summary.json")
    write_json(sum_file, summary)
    return Outcome([paths_file, sum_file])


def _riccati_outputs(params: LqParams, steps: int, out: str, name: str, y, v) -> Outcome:
    sol = solve_riccati(params, steps)
    table = os.path.join(out, f"{name}.csv")
    write_table(table, ["t", "psi1", "psi2", "psi3", "psi4"],
                ([t, *row] for t, row in zip(sol.t, sol.psi)))
    interior = sol.t < params.T
    eta, grad = eta_lq(sol, 0.0, y, v)
    summary = dict(psi_0=sol.psi[0], psi_T=sol.psi[-1], steps=steps, y=y, v=v, eta_0=float(eta),
                   grad_y_eta_0=float(grad),
                   max_psi1_before_T=float(sol.psi[interior, 0].max()),
                   max_psi3_before_T=float(sol.psi[interior, 2].max()),
                   psi1_negative=bool(np.all(sol.psi[interior, 0] < 0)),
                   psi3_negative=bool(np.all(sol.psi[interior, 2] < 0)),
                   parameters=dict(alpha=params.alpha, beta=params.beta, sigma_F=params.sigma_F,
                                   lam=params.lam, gamma=params.gamma, T=params.T),
                   conventions=CONVENTIONS)
    sum_file = os.path.join(out, "summary.json")
    write_json(sum_file, summary)
    return Outcome([table, sum_file])


def cmd_riccati(cfg: RunConfig, out: str) -> Outcome:
    params = _lq(cfg, "lq_infinite")
    opts = cfg.commands["riccati"]
    y = float(cfg.y0[0]) if opts["y"] is None else float(opts["y"])
    v = _initial_v(cfg) if opts["v"] is None else float(opts["v"])
    return _riccati_outputs(params, _riccati_steps(cfg), out, "riccati", y, v)


def cmd_figure1(cfg: RunConfig | None, out: str, steps: int | None = None) -> Outcome:
    res = _riccati_outputs(FIGURE1, steps or FIGURE1_STEPS, out, "figure1", 1.0, 1.0)
    with open(res.files[1]) as fh:
        summary = json.load(fh)
    if not (summary["psi1_negative"] and summary["psi3_negative"]):
        res.exit_code = EXIT_VERIFY
    return res


def cmd_pointwise(cfg: RunConfig, out: str) -> Outcome:
    params = _lq(cfg, "lq_pointwise")
    report = check_pointwise_constraints(params)
    sol = pointwise_solution(params)
    table = os.path.join(out, "pointwise.csv")
    write_table(table, ["t", "Q", "psi", "qhat"], sol.table(cfg.grid))
    y0, v0 = float(cfg.y0[0]), _initial_v(cfg)
    p0 = float(sol.p_hat(0.0, y0, v0))
    summary = dict(k=sol.k, constraint_residuals=report.residuals, constraints_hold=report.passed,
                   terminal_consistent=sol.terminal_consistent, y0=y0, v0=v0, p_hat_0=p0,
                   value=value_at_zero(p0, cfg.utility), conventions=CONVENTIONS)
    sum_file = os.path.join(out, "summary.json")
    write_json(sum_file, summary)
    return Outcome([table, sum_file])


def cmd_lsmc(cfg: RunConfig, out: str) -> Outcome:
    s = lsmc_solve(cfg.coeffs, cfg.delay, cfg.utility, cfg.grid, cfg.y0, BasisSpec(cfg.basis_degree),
                   cfg.n_paths, cfg.picard, cfg.seed, cfg.clip, cfg.workers, cfg.antithetic,
                   cfg.commands["lsmc"]["q_method"])
    diag = contraction_diagnostics(cfg.coeffs, cfg.delay, cfg.grid, cfg.y0, cfg.utility.gamma,
                                   factors=s.factors)
    summary = dict(p_hat_0=s.p_hat0, value=value_at_zero(s, cfg.utility), clip_count=s.clip_count,
                   picard_deltas=s.picard_deltas,
                   diagnostics=dict(xi_sup=diag.xi_sup, beta=diag.beta,
                                    smallness_holds=diag.smallness_holds))
    sum_file = os.path.join(out, "summary.json")
    write_json(sum_file, summary)
    coef_file = os.path.join(out, "coefficients.csv")
    rows = []
    for k, fit in enumerate(s.steps):
        terms = ["*".join(f"u{i + 1}" for i in term) or "1" for term in fit.basis.terms]
        for j, term in enumerate(terms):
            rows.append([str(k), s.t[k], "cond_mean", term, fit.cond_mean[j]])
            for n in range(fit.q_coef.shape[1]):
                rows.append([str(k), s.t[k], f"qhat{n + 1}", term, fit.q_coef[j, n]])
    write_table(coef_file, ["step", "t", "target", "term", "coef"], rows)
    return Outcome([sum_file, coef_file])


def cmd_martingale(cfg: RunConfig, out: str) -> Outcome:
    f = _factors(cfg)
    density = simulate_H0(cfg.coeffs, f)
    sol = estimate_M_and_psi(density, f, cfg.utility, BasisSpec(cfg.basis_degree))
    wealth = simulate_wealth(f, cfg.coeffs, cfg.utility, sol.strategy(cfg.coeffs), cfg.workers)
    rep = check_theorem41(sol, density, f, cfg.coeffs, cfg.utility, wealth.X)
    summary = dict(phi=sol.phi.phi, phi_se=sol.phi.phi_se, Zx=sol.phi.Zx, M0=sol.M0, M0_se=sol.M0_se,
                   **rep.as_dict())
    sum_file = os.path.join(out, "summary.json")
    write_json(sum_file, summary)
    return Outcome([sum_file])


def run_verify_suite(cfg: RunConfig) -> list[TestReport]:
    """Hamiltonian, martingale, supermartingale and dominance checks plus a negative control."""
    opts = cfg.commands["verify"]
    plan = optimal_plan(cfg)
    f, c, u = plan.factors, cfg.coeffs, cfg.utility
    K = f.K
    target = float(u.U(u.x)) * math.exp(plan.p_hat0)
    reports = []

    # Hamiltonian maximiser at sampled mid-horizon states
    k = K // 2
    diffs = []
    n_states = min(int(opts["argmax_states"]), f.n_paths)
    for i in np.linspace(0, f.n_paths - 1, n_states).astype(int):
        y, v, z = f.state(k, slice(i, i + 1))
        p = math.exp(plan.p_hat[i, k])
        diffs.append(argmax_check(u, c, y, v, z, p, p * plan.q_hat[i, k][None, :]).statistic)
    worst = max(diffs)
    reports.append(TestReport("hamiltonian_argmax", worst, 1e-6, worst <= 1e-6, n_states, f.seed, f.dt,
                              dict(step=k, differences=diffs)))

    n_times = int(opts["n_times"])
    w_opt = simulate_wealth(f, c, u, plan.strategy, cfg.workers)
    reports.append(martingale_test(adjoint_product(w_opt.Xtilde, plan.p_hat), target, f, n_times))

    shift = float(opts["shift"])
    shifted = lambda k, t, y, v, z, idx: plan.strategy(k, t, y, v, z, idx) + shift
    w_shift = simulate_wealth(f, c, u, shifted, cfg.workers)
    reports.append(supermartingale_test(adjoint_product(w_shift.Xtilde, plan.p_hat), n_times,
                                        f.seed, f.dt, name=f"supermartingale_shift_{shift:g}"))

    cands = perturbed_strategies(plan.strategy, n=int(opts["perturbations"]), seed=cfg.seed % 2**32,
                                 T=cfg.grid.T)
    reports.append(utility_dominance_test(f, c, u, plan.strategy, cands, value=target,
                                          workers=cfg.workers))

    # the doubled strategy is not optimal unless it vanishes, so the test must reject it
    doubled = lambda k, t, y, v, z, idx: 2.0 * plan.strategy(k, t, y, v, z, idx)
    w_bad = simulate_wealth(f, c, u, doubled, cfg.workers)
    inner = martingale_test(adjoint_product(w_bad.Xtilde, plan.p_hat), target, f, n_times)
    reports.append(TestReport("negative_control_doubled_pi", inner.statistic, inner.tolerance,
                              not inner.passed, inner.n_paths, inner.seed, inner.dt,
                              dict(inner_passed=inner.passed, **inner.details)))
    for r in reports:
        r.details["method"] = plan.method
    return reports


def cmd_verify(cfg: RunConfig, out: str) -> Outcome:
    reports = run_verify_suite(cfg)
    path = os.path.join(out, "reports.json")
    write_json(path, [r.as_dict() for r in reports])
    ok = all(r.passed for r in reports)
    return Outcome([path], EXIT_OK if ok else EXIT_VERIFY)


HANDLERS = {
    "simulate": cmd_simulate,
    "riccati": cmd_riccati,
    "pointwise": cmd_pointwise,
    "lsmc": cmd_lsmc,
    "martingale": cmd_martingale,
    "verify": cmd_verify,
}


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


def run(subcommand: str, config_path: str | None, out_dir: str, seed=None, paths=None,
        steps=None, workers=None) -> int:
    """Run one subcommand; always leaves ``manifest.json`` in ``out_dir``."""
    start = time.perf_counter()
    manifest = dict(subcommand=subcommand, config=config_path, config_hash=None, seed=None,
                    seed_source=None, workers=workers, versions=_versions(), conventions=CONVENTIONS,
                    outputs=[], error=None, exit_code=None, timings={})
    code = EXIT_OK
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out_dir}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if subcommand not in COMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        cfg = None
        if subcommand == "figure1" and config_path is None:
            outcome = cmd_figure1(None, out_dir, steps)
        else:
            if config_path is None:
                raise ConfigError("--config is required for this subcommand")
            cfg = load_config(config_path, seed=seed, paths=paths, steps=steps, workers=workers)
            manifest.update(config_hash=cfg.digest(), seed=cfg.seed, seed_source=cfg.seed_source,
                            workers=cfg.workers)
            t_load = time.perf_counter()
            manifest["timings"]["load_s"] = t_load - start
            if subcommand == "figure1":
                outcome = cmd_figure1(cfg, out_dir, steps)
            else:
                outcome = HANDLERS[subcommand](cfg, out_dir)
        manifest["outputs"] = [os.path.basename(p) for p in outcome.files]
        code = outcome.exit_code
        if code == EXIT_VERIFY:
            manifest["error"] = "verification failed"
    except (ConfigError, ConstraintError, MissingHistoryError) as exc:
        code = EXIT_CONFIG
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        code = EXIT_NUMERIC
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    except DelayfolioError as exc:
        code = EXIT_CONFIG
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    manifest["exit_code"] = code
    manifest["timings"]["total_s"] = time.perf_counter() - start
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    if manifest["error"]:
        print(f"error: {manifest['error']}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="delayfolio",
        description="Portfolio optimisation under delayed factor models.")
    parser.add_argument("subcommand", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument("--seed", type=int, help="random seed, overrides the config")
    parser.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    parser.add_argument("--steps", type=int, help="number of time steps")
    parser.add_argument("--workers", type=int, help="worker threads")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.out, seed=args.seed, paths=args.paths,
               steps=args.steps, workers=args.workers)


if __name__ == "__main__":
    sys.exit(main())
