"""Strict YAML run configuration.

Layout::

    model:
      dims: {assets: 1, factors: 1, noise: 1}
      family: constant
      params: {r: 0.03, mu: 0.08, sigma: 0.2}
      delay: {lambda: 1.0, delta: inf, interpolate: false, history: null}
      utility: {gamma: 0.5, x: 1.0}
      y0: [0.0]
      v0: null
    numerics:
      T: 1.0
      steps: 50
      paths: 10000
      basis_degree: 2
      picard: 2
      clip: 50.0
      seed: 0
      workers: 1
      antithetic: false
    simulate: {strategy: zero, pi: null, dump_paths: 100}
    lsmc: {q_method: joint}
    verify: {n_times: 5, perturbations: 10, argmax_states: 5, shift: 0.5}

Every section other than ``model`` is optional.  Unknown keys anywhere are
rejected.  ``delta`` accepts ``inf``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import yaml

from .closed_form import LqParams
from .delay_sde import TimeGrid
from .errors import ConfigError
from .market_model import (
    CoefficientSet,
    DelaySpec,
    ModelDims,
    PowerUtility,
    build_coefficients,
)

DEFAULT_SEED = 20240101
SEED_ENV = "DELAYFOLIO_SEED"

_MISSING = object()

MODEL_KEYS = {
    "dims": {"assets": 1, "factors": 1, "noise": 1},
    "family": _MISSING,
    "params": {},
    "delay": {"lambda": 1.0, "delta": math.inf, "interpolate": False, "history": None},
    "utility": {"gamma": 0.5, "x": 1.0},
    "y0": None,
    "v0": None,
}
NUMERICS_KEYS = {
    "T": 1.0,
    "steps": 50,
    "paths": 10_000,
    "basis_degree": 2,
    "picard": 2,
    "clip": 50.0,
    "seed": None,
    "workers": 1,
    "antithetic": False,
}
COMMAND_KEYS = {
    "simulate": {"strategy": "zero", "pi": None, "dump_paths": 100},
    "riccati": {"y": None, "v": None},
    "pointwise": {},
    "lsmc": {"q_method": "joint"},
    "martingale": {},
    "verify": {"n_times": 5, "perturbations": 10, "argmax_states": 5, "shift": 0.5},
}
HISTORY_KEYS = {"times", "values"}


def _strict(section: dict, schema: dict, where: str) -> dict:
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}; allowed: {sorted(schema)}")
    out = {}
    for key, default in schema.items():
        if key in section:
            val = section[key]
            if isinstance(default, dict) and default:
                val = _strict(val, default, f"{where}.{key}")
            out[key] = val
        elif default is _MISSING:
            raise ConfigError(f"missing required key {where}.{key}")
        else:
            out[key] = copy.deepcopy(default)
    return out


def _number(x, name, integer=False, positive=False, allow_inf=False):
    if isinstance(x, str) and allow_inf and x.strip().lower() in ("inf", "+inf", "infinity"):
        x = math.inf
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{name} must be a number, got {x!r}")
    if integer and (int(x) != x or math.isinf(x)):
        raise ConfigError(f"{name} must be an integer, got {x!r}")
    if math.isnan(x) or (math.isinf(x) and not allow_inf):
        raise ConfigError(f"{name} must be finite, got {x!r}")
    if positive and not x > 0:
        raise ConfigError(f"{name} must be positive, got {x!r}")
    return int(x) if integer else float(x)


@dataclass
class RunConfig:
    """Validated configuration with the seed already resolved."""

    raw: dict
    dims: ModelDims
    coeffs: CoefficientSet
    delay: DelaySpec
    utility: PowerUtility
    y0: np.ndarray
    v0: float | None
    grid: TimeGrid
    n_paths: int
    basis_degree: int
    picard: int
    clip: float
    seed: int
    seed_source: str
    workers: int
    antithetic: bool
    commands: dict

    @property
    def lq(self) -> LqParams | None:
        if self.coeffs.family in ("lq_infinite", "lq_pointwise"):
            return LqParams.from_coefficients(self.coeffs, self.delay, self.utility.gamma, self.grid.T)
        return None

    def digest(self) -> str:
        """SHA-256 of the resolved configuration (worker count excluded)."""
        body = copy.deepcopy(self.raw)
        body["numerics"].pop("workers", None)
        body["numerics"]["seed"] = self.seed
        text = json.dumps(body, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def resolve_seed(cli_seed, config_seed) -> tuple[int, str]:
    """Precedence: command line, config, ``DELAYFOLIO_SEED``, built-in default."""
    for value, source in ((cli_seed, "cli"), (config_seed, "config"),
                          (os.environ.get(SEED_ENV), "env")):
        if value is None or value == "":
            continue
        try:
            seed = int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"seed from {source} is not an integer: {value!r}")
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed from {source} must lie in [0, 2^64), got {seed}")
        return seed, source
    return DEFAULT_SEED, "default"


def load_yaml(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not data:
        raise ConfigError(f"config {path} is empty")
    if not isinstance(data, dict):
        raise ConfigError("config top level must be a mapping")
    return data


def parse_config(data: dict, seed=None, paths=None, steps=None, workers=None) -> RunConfig:
    """Validate ``data`` and apply command-line overrides."""
    if not data:
        raise ConfigError("config is empty")
    allowed = {"model", "numerics", *COMMAND_KEYS}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level sections: {unknown}; allowed: {sorted(allowed)}")
    if "model" not in data:
        raise ConfigError("missing required section 'model'")
    model = _strict(data["model"], MODEL_KEYS, "model")
    num = _strict(data.get("numerics"), NUMERICS_KEYS, "numerics")
    commands = {name: _strict(data.get(name), schema, name) for name, schema in COMMAND_KEYS.items()}

    if paths is not None:
        num["paths"] = paths
    if steps is not None:
        num["steps"] = steps
    if workers is not None:
        num["workers"] = workers

    d = model["dims"]
    dims = ModelDims(_number(d["assets"], "dims.assets", integer=True),
                     _number(d["factors"], "dims.factors", integer=True),
                     _number(d["noise"], "dims.noise", integer=True))
    u = model["utility"]
    utility = PowerUtility(_number(u["gamma"], "utility.gamma"), _number(u["x"], "utility.x"))
    if not isinstance(model["family"], str):
        raise ConfigError("model.family must be a string")
    if not isinstance(model["params"], dict):
        raise ConfigError("model.params must be a mapping")
    coeffs = build_coefficients(model["family"], dims, utility.gamma, model["params"])

    dl = model["delay"]
    history = dl["history"]
    if history is not None:
        if not isinstance(history, dict) or set(history) != HISTORY_KEYS:
            raise ConfigError("delay.history must be null or a mapping with keys 'times' and 'values'")
        history = (np.asarray(history["times"], dtype=float), np.asarray(history["values"], dtype=float))
    if not isinstance(dl["interpolate"], bool):
        raise ConfigError("delay.interpolate must be true or false")
    delay = DelaySpec(_number(dl["lambda"], "delay.lambda", positive=True),
                      _number(dl["delta"], "delay.delta", positive=True, allow_inf=True),
                      history, dl["interpolate"])

    y0 = np.zeros(dims.n_factors) if model["y0"] is None else np.atleast_1d(
        np.asarray(model["y0"], dtype=float))
    if y0.shape != (dims.n_factors,):
        raise ConfigError(f"model.y0 must have {dims.n_factors} entries")
    v0 = None if model["v0"] is None else _number(model["v0"], "model.v0")

    grid = TimeGrid(_number(num["T"], "numerics.T", positive=True),
                    _number(num["steps"], "numerics.steps", integer=True, positive=True))
    if not delay.infinite:
        grid.delay_steps(delay)  # raises unless delta sits on the grid or interpolation is on
    seed_value, source = resolve_seed(seed, num["seed"])
    for flag in ("antithetic",):
        if not isinstance(num[flag], bool):
            raise ConfigError(f"numerics.{flag} must be true or false")
    cfg = RunConfig(
        raw={"model": model, "numerics": num, **commands},
        dims=dims, coeffs=coeffs, delay=delay, utility=utility, y0=y0, v0=v0, grid=grid,
        n_paths=_number(num["paths"], "numerics.paths", integer=True, positive=True),
        basis_degree=_number(num["basis_degree"], "numerics.basis_degree", integer=True),
        picard=_number(num["picard"], "numerics.picard", integer=True),
        clip=_number(num["clip"], "numerics.clip", positive=True),
        seed=seed_value, seed_source=source,
        workers=_number(num["workers"], "numerics.workers", integer=True, positive=True),
        antithetic=num["antithetic"], commands=commands,
    )
    if cfg.basis_degree < 0 or cfg.picard < 0:
        raise ConfigError("basis_degree and picard must be non-negative")
    return cfg


def load_config(path, **overrides) -> RunConfig:
    return parse_config(load_yaml(path), **overrides)


__all__ = ["DEFAULT_SEED", "RunConfig", "SEED_ENV", "load_config", "load_yaml", "parse_config",
           "resolve_seed"]
