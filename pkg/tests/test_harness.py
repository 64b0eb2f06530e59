import hashlib
import io
import json
import math

import numpy as np
import pytest

from rtwave.equilibrium import PressureLaw
from rtwave.errors import ConfigError, DataError, DomainError
from rtwave.harness import (decay_rate_factor, deviatoric_kernel_check, execute,
                            extension_bound_check, fit_decay, is_nonincreasing,
                            korn_constant_estimate, load_config, parse_config, run,
                            sigma_limit_experiment, stability_table, vandermonde_check)
from rtwave.harness.cli import main

from conftest import make_profile

BASE = """
scenario = "{scenario}"
seed = 3

[physical]
g = 1.0
p_atm = 1
ell = 1.0
b = 1.0
L1 = 1.0
L2 = 1.0

[law_plus]
K = 1.0
alpha = 2.0

[law_minus]
K = {K_minus}
alpha = 2.0

[grid]
N_h = 8
N_v_plus = 12
N_v_minus = 12
"""

SIM = """
[simulation]
dt = 0.1
steps = 6
scheme = "imex2"
random_u = 1e-3
eta_modes = [{n = [1, 0], plus = 1e-3, minus = 5e-4}]
"""


def _config(tmp_path, scenario, K_minus=9.0, extra="", name="cfg.toml"):
    p = tmp_path / name
    p.write_text(BASE.format(scenario=scenario, K_minus=K_minus) + extra)
    return p


# -- configuration -------------------------------------------------------------------
def test_toml_and_json_agree(tmp_path):
    a = load_config(_config(tmp_path, "equilibrium"))
    data = {"scenario": "equilibrium", "seed": 3,
            "physical": {"g": 1.0, "p_atm": 1, "ell": 1.0, "b": 1.0, "L1": 1.0, "L2": 1.0},
            "law_plus": {"K": 1.0, "alpha": 2.0}, "law_minus": {"K": 9.0, "alpha": 2.0},
            "grid": {"N_h": 8, "N_v_plus": 12, "N_v_minus": 12}}
    (tmp_path / "c.json").write_text(json.dumps(data))
    b = load_config(tmp_path / "c.json")
    assert a.hash() == b.hash()
    assert isinstance(a["physical"]["p_atm"], float)


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d["physical"].update(g=-1.0), "physical.g"),
    (lambda d: d["physical"].update(gravity=1.0), "physical.gravity"),
    (lambda d: d["grid"].update(N_v_plus=13), "grid.N_v_plus"),
    (lambda d: d["law_minus"].update(kind="ideal"), "law_minus.kind"),
    (lambda d: d["law_plus"].update(alpha=1.0), "law_plus.alpha"),
    (lambda d: d.update(seed=-1), "seed"),
    (lambda d: d.pop("grid"), "grid"),
    (lambda d: d.update(extra={}), "extra"),
    (lambda d: d.update(scenario="nope"), "scenario"),
])
def test_invalid_configs_name_the_field(mutate, path):
    d = {"scenario": "stability-map", "physical": {}, "law_plus": {}, "law_minus": {},
         "grid": {}}
    mutate(d)
    with pytest.raises(ConfigError) as exc:
        parse_config(d)
    assert exc.value.path == path


def test_hash_ignores_output_location(tmp_path):
    a = load_config(_config(tmp_path, "equilibrium"))
    b = a.replace(output_dir="elsewhere", threads=4)
    assert a.hash() == b.hash()
    assert a.hash() != a.replace(seed=4).hash()


def test_cli_overrides(tmp_path):
    cfg = load_config(_config(tmp_path, "equilibrium"), "stability-map",
                      {"seed": 9, "output_dir": str(tmp_path / "o"), "threads": None})
    assert cfg.scenario == "stability-map" and cfg.seed == 9


# -- runs --------------------------------------------------------------------------------
def test_equilibrium_run_and_manifest(tmp_path):
    cfg = load_config(_config(tmp_path, "equilibrium"))
    res = execute(cfg, tmp_path / "out")
    man = json.loads((res.output_dir / "MANIFEST.json").read_text())
    assert man["config_hash"] == cfg.hash() and man["seed"] == 3
    for entry in man["files"]:
        data = (res.output_dir / entry["path"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == entry["sha256"]
        assert len(data) == entry["bytes"]
    summary = json.loads((res.output_dir / "summary.json").read_text())
    assert all(summary["admissibility"]["passed"])
    assert summary["masses"]["relative_gap"] < 1e-10


def test_runs_are_deterministic(tmp_path):
    cfg = load_config(_config(tmp_path, "simulate", extra=SIM))
    a = execute(cfg, tmp_path / "a").output_dir
    b = execute(cfg, tmp_path / "b").output_dir
    for name in ("series.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_malformed_config_leaves_no_outputs(tmp_path):
    p = _config(tmp_path, "equilibrium", K_minus=-1.0)
    out = tmp_path / "never"
    assert main(["equilibrium", "--config", str(p), "--out", str(out)]) == 2
    assert not out.exists()
    assert [x.name for x in tmp_path.iterdir()] == ["cfg.toml"]


def test_scenario_failure_leaves_no_outputs(tmp_path):
    extra = SIM.replace("plus = 1e-3", "plus = 0.9")
    cfg = load_config(_config(tmp_path, "simulate", extra=extra))
    out = tmp_path / "bad"
    stream = io.StringIO()
    assert run(cfg, out, stream) == 1
    assert "GeometryBreakdownError" in stream.getvalue()
    assert not out.exists()
    assert [x.name for x in tmp_path.iterdir()] == ["cfg.toml"]


def test_refuses_foreign_output_dir(tmp_path):
    out = tmp_path / "taken"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    cfg = load_config(_config(tmp_path, "equilibrium"))
    with pytest.raises(ConfigError):
        execute(cfg, out)
    assert (out / "keep.txt").exists()


def test_cli_stability_map(tmp_path, capsys):
    p = _config(tmp_path, "stability-map", extra="\n[stability]\nsigma_minus = [0.0, 2.0]\nnmax = 1\n")
    out = tmp_path / "map"
    assert main(["stability-map", "--config", str(p), "--out", str(out)]) == 0
    assert "finished" in capsys.readouterr().out
    verdict = json.loads((out / "verdict.json").read_text())
    assert verdict["sigma_star"] == pytest.approx(1.0, rel=2e-4)
    assert (out / "stability_map.csv").exists()


# -- analysis helpers --------------------------------------------------------------------
def test_fit_decay_synthetic():
    t = np.linspace(0, 10, 101)
    fit = fit_decay(np.c_[t, 5 * np.exp(-2 * t)])
    assert fit.rate == pytest.approx(2.0, rel=1e-12) and fit.r_squared == pytest.approx(1.0)
    alg = fit_decay(np.c_[t, (1 + t) ** -3.0], "algebraic")
    assert alg.exponent == pytest.approx(3.0, rel=1e-12)
    with pytest.raises(DataError):
        fit_decay(np.c_[t[:10], np.exp(-t[:10])])
    bad = np.exp(-t)
    bad[50] = 0.0
    with pytest.raises(DataError):
        fit_decay(np.c_[t, bad])
    assert is_nonincreasing(np.c_[t, np.exp(-t)])[0]
    assert not is_nonincreasing(np.c_[t, 1 + 0.1 * np.sin(t)])[0]


def test_decay_rate_factor():
    assert decay_rate_factor(1.0, 1.0, -1.0, 0.0) == 1.0
    assert decay_rate_factor(0.5, 0.5, -1.0, 0.0) == pytest.approx(2.0)
    assert decay_rate_factor(0.5, 1.25, 1.0, 1.0) == pytest.approx(4.0)
    assert decay_rate_factor(2.0, 3.0, 1.0, 1.0) == 1.0
    with pytest.raises(DomainError):
        decay_rate_factor(1.0, 0.5, 1.0, 1.0)
    with pytest.raises(DomainError):
        decay_rate_factor(0.0, 0.0, -1.0, 0.0)


def test_korn_and_kernel(small_grid):
    rep = korn_constant_estimate(small_grid, nmax=1)
    assert rep.minimum > 0.1
    free = korn_constant_estimate(small_grid, nmax=1, dirichlet=False)
    assert abs(free.minimum) < 1e-8
    k = deviatoric_kernel_check(small_grid, samples=5)
    assert k.annihilated and k.unique_zero


def test_extension_and_vandermonde_checks(small_grid):
    for which in ("upper", "lower"):
        assert extension_bound_check(small_grid, 1, which, samples=10).bounded
    assert max(vandermonde_check(4).values()) < 1e-10


def test_stability_table_small(small_grid):
    _, params = make_profile("stable")
    cells = stability_table(PressureLaw.polytropic(1.0, 2.0), params, small_grid, nmax=1)
    assert len(cells) == 9
    assert all(c.match for c in cells), [c.to_dict() for c in cells if not c.match]


def test_sigma_limit_requires_negative_jump(tmp_path):
    cfg = load_config(_config(tmp_path, "sigma-limit", extra=SIM))
    with pytest.raises(ConfigError):
        sigma_limit_experiment(cfg)


def test_sigma_limit_small(tmp_path):
    cfg = load_config(_config(tmp_path, "sigma-limit", K_minus=0.36, extra=SIM))
    rep = sigma_limit_experiment(cfg, [0.1, 0.05])
    assert rep.complete and all(math.isfinite(d) and d > 0 for d in rep.distances)
    with pytest.raises(ConfigError):
        sigma_limit_experiment(cfg, [0.05, 0.1])
