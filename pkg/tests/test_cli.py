import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from delayfolio.cli import main, run
from delayfolio.config import DEFAULT_SEED, SEED_ENV, parse_config, resolve_seed
from delayfolio.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data) if not isinstance(data, str) else data)
    return str(path)


def merton_cfg(**numerics):
    return {"model": {"family": "constant", "params": {"r": 0.03, "mu": 0.08, "sigma": 0.2}},
            "numerics": {"steps": 20, "paths": 2000, **numerics}}


def manifest(out):
    return json.loads((Path(out) / "manifest.json").read_text())


def test_empty_config_exit_2(tmp_path):
    out = tmp_path / "o"
    assert run("simulate", write(tmp_path, ""), str(out)) == 2
    m = manifest(out)
    assert m["exit_code"] == 2 and "empty" in m["error"]


def test_missing_config_file(tmp_path):
    assert run("lsmc", str(tmp_path / "nope.yaml"), str(tmp_path / "o")) == 2
    assert run("lsmc", None, str(tmp_path / "o2")) == 2


@pytest.mark.parametrize("mutate", [
    lambda d: d["model"].update(famly="x"),
    lambda d: d["model"]["params"].update(alpha=1.0),
    lambda d: d["numerics"].update(stepz=3),
    lambda d: d.update(extra={}),
    lambda d: d["model"].pop("family"),
    lambda d: d["numerics"].update(steps=2.5),
    lambda d: d["model"].update(delay={"lambda": 1.0, "delta": 0.123}),
])
def test_schema_rejections(tmp_path, mutate):
    data = merton_cfg()
    mutate(data)
    out = tmp_path / "o"
    assert run("simulate", write(tmp_path, data), str(out)) == 2
    assert manifest(out)["error"]


def test_delta_accepts_inf_spellings():
    for spelled in ("inf", float("inf"), "Infinity"):
        data = merton_cfg()
        data["model"]["delay"] = {"lambda": 1.0, "delta": spelled}
        assert parse_config(data).delay.infinite


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert resolve_seed(None, None) == (DEFAULT_SEED, "default")
    monkeypatch.setenv(SEED_ENV, "17")
    assert resolve_seed(None, None) == (17, "env")
    assert resolve_seed(None, 5) == (5, "config")
    assert resolve_seed(3, 5) == (3, "cli")
    with pytest.raises(ConfigError):
        resolve_seed(-1, None)
    monkeypatch.setenv(SEED_ENV, "abc")
    with pytest.raises(ConfigError):
        resolve_seed(None, None)


def test_cli_overrides(tmp_path):
    cfg = parse_config(merton_cfg(seed=4), seed=9, paths=777, steps=7, workers=3)
    assert (cfg.seed, cfg.n_paths, cfg.grid.K, cfg.workers) == (9, 777, 7, 3)
    # the worker count does not change the digest
    assert cfg.digest() == parse_config(merton_cfg(seed=4), seed=9, paths=777, steps=7).digest()


def test_figure1(tmp_path):
    out = tmp_path / "f"
    assert main(["figure1", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "figure1.csv").open()))
    assert list(rows[0]) == ["t", "psi1", "psi2", "psi3", "psi4"]
    t = np.array([float(r["t"]) for r in rows])
    psi = np.array([[float(r[f"psi{i}"]) for i in range(1, 5)] for r in rows])
    assert np.all(psi[t < 1, 0] < 0) and np.all(psi[t < 1, 2] < 0)
    assert np.all(psi[-1] == 0)
    assert len(rows[1]["psi1"].lstrip("-").replace(".", "").lstrip("0")) <= 17
    m = manifest(out)
    assert m["error"] is None and m["outputs"] == ["figure1.csv", "summary.json"]
    assert m["conventions"]["psi4_rhs"]


def test_verify_merton_default_seed(tmp_path, monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    out = tmp_path / "v"
    assert main(["verify", "--config", str(CONFIGS / "merton.yaml"), "--out", str(out)]) == 0
    reports = json.loads((out / "reports.json").read_text())
    assert {r["name"] for r in reports} >= {"hamiltonian_argmax", "martingale", "utility_dominance"}
    assert all(r["passed"] for r in reports)
    assert all({"seed", "n_paths", "dt"} <= set(r) for r in reports)
    assert manifest(out)["seed"] == DEFAULT_SEED


def test_numeric_failure_exit_3(tmp_path):
    data = {"model": {"family": "affine", "params": {"b_y": 1e200, "mu0": 0.05}, "y0": [1.0]},
            "numerics": {"steps": 20, "paths": 10}}
    out = tmp_path / "o"
    assert run("simulate", write(tmp_path, data), str(out)) == 3
    assert "NonFinite" in manifest(out)["error"]


def test_incomplete_market_martingale_exit_2(tmp_path):
    data = {"model": {"dims": {"assets": 1, "factors": 1, "noise": 2}, "family": "constant",
                      "params": {"r": 0.03, "mu": 0.08, "sigma": [[0.2, 0.1]]}},
            "numerics": {"steps": 10, "paths": 2000}}
    assert run("martingale", write(tmp_path, data), str(tmp_path / "o")) == 2


def test_wrong_family_for_riccati(tmp_path):
    assert run("riccati", write(tmp_path, merton_cfg()), str(tmp_path / "o")) == 2


def test_pointwise_literal_summary(tmp_path):
    out = tmp_path / "p"
    assert run("pointwise", str(CONFIGS / "pointwise_literal.yaml"), str(out)) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["constraints_hold"] and not s["terminal_consistent"] and s["k"] == pytest.approx(-1)
    head = (out / "pointwise.csv").read_text().splitlines()[0]
    assert head == "t,Q,psi,qhat"


def test_simulate_outputs(tmp_path):
    data = merton_cfg()
    data["simulate"] = {"strategy": "constant", "pi": [2.5], "dump_paths": 3}
    out = tmp_path / "s"
    assert run("simulate", write(tmp_path, data), str(out)) == 0
    rows = list(csv.reader((out / "paths.csv").open()))
    assert rows[0] == ["t", "path_id", "Y1", "V", "Z1", "X", "Xtilde", "pi1"]
    assert len(rows) == 1 + 3 * 21
    assert float(rows[1][7]) == 2.5


@pytest.mark.parametrize("cmd,config", [
    ("simulate", "pointwise.yaml"),
    ("riccati", "figure1.yaml"),
    ("pointwise", "pointwise.yaml"),
    ("lsmc", "pointwise.yaml"),
    ("martingale", "merton.yaml"),
    ("verify", "pointwise.yaml"),
    ("figure1", None),
])
def test_byte_identical_outputs(tmp_path, cmd, config):
    outs = []
    for w in (1, 8):
        out = tmp_path / f"w{w}"
        args = [cmd, "--out", str(out), "--workers", str(w), "--seed", "123"]
        if config:
            args += ["--config", str(CONFIGS / config), "--paths", "3000", "--steps", "20"]
        assert main(args) in (0, 1)
        outs.append({p.name: p.read_bytes() for p in out.iterdir() if p.name != "manifest.json"})
    assert outs[0] and outs[0] == outs[1]
