"""Scenario dispatch with staged outputs and a checksummed manifest.

Every scenario writes into a fresh staging directory next to the output
directory.  Only after the scenario succeeds is ``MANIFEST.json`` written
and the staging directory moved into place, so a failing run leaves no
partial outputs.  Sweep members may run on worker threads; their results are
gathered in input order and all files are written from the calling thread.
"""
from __future__ import annotations

import hashlib
import json
import math
import platform
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..equilibrium import build_equilibrium, check_admissibility, equilibrium_masses
from ..errors import ConfigError, RTWaveError
from ..geometry import vandermonde_coefficients
from ..io import dump_state, write_csv, write_profile_csv
from ..simulation import Simulator, TIERS
from ..stability import (assemble_mode_operator, energy_form_positivity, find_neutral_sigma,
                         growth_rate, lattice_modes, sharp_poincare_constant)
from . import analysis
from .config import ExperimentConfig

__all__ = ["RunResult", "run", "execute", "initial_state_for", "SURROGATE_NOTE"]

SURROGATE_NOTE = ("E, D and F_surrogate are low-order surrogates of the energy, dissipation and "
                  "highest-regularity functionals (tier {tier}); time derivatives are backward "
                  "difference quotients of stored states")


@dataclass
class RunResult:
    """Outcome of :func:`execute`: the output directory and a JSON-ready summary."""

    output_dir: Path
    summary: dict
    files: list = field(default_factory=list)


class _Writer:
    """Collects outputs in a staging directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.files = []

    def path(self, rel):
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(str(rel))
        return p

    def csv(self, rel, header, rows, comment=None):
        write_csv(self.path(rel), header, rows, comment)

    def json(self, rel, obj):
        self.path(rel).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def state(self, rel, state, extra=None):
        dump_state(self.path(rel), state, extra)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x if math.isfinite(x) else None
    return obj


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(cfg, writer):
    files = sorted(set(writer.files))
    return {
        "scenario": cfg.scenario,
        "config_hash": cfg.hash(),
        "config": cfg.canonical(),
        "seed": cfg.seed,
        "versions": {"rtwave": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "files": [{"path": f, "sha256": _sha256(writer.root / f),
                   "bytes": (writer.root / f).stat().st_size} for f in files],
    }


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------
def _scenario_equilibrium(cfg, w):
    params = cfg.params()
    lp, lm = cfg.law("plus"), cfg.law("minus")
    report = check_admissibility(lp, lm, params)
    n = cfg["equilibrium"]["n_samples"]
    profile = cfg.profile(params)
    other = build_equilibrium(lp, lm, params, n,
                              "inversion" if profile.method == "closed" else "closed")
    agree = max(float(np.max(np.abs(profile.rho_plus - other.rho_plus) / other.rho_plus)),
                float(np.max(np.abs(profile.rho_minus - other.rho_minus) / other.rho_minus)))
    masses = equilibrium_masses(profile, params)
    summary = dict(profile.summary())
    summary.update({
        "admissibility": {"passed": list(report.passed), "bound_ell": report.bound_ell,
                          "bound_b": report.bound_b},
        "masses": {"quadrature": [masses.M_plus, masses.M_minus],
                   "pressure_difference": [masses.M_plus_closed, masses.M_minus_closed],
                   "relative_gap": masses.relative_gap()},
        "method": profile.method,
        "closed_vs_inversion": agree,
    })
    write_profile_csv(w.path("profile.csv"), profile)
    w.json("summary.json", summary)
    return summary


def _mode_index(xi, params):
    return [int(round(xi[0] * params.L1)), int(round(xi[1] * params.L2))]


def _scenario_stability_map(cfg, w):
    params = cfg.params()
    grid = cfg.grid()
    st = cfg["stability"]
    sig_list = st["sigma_minus"] if st["sigma_minus"] is not None else [params.sigma_minus]
    modes = lattice_modes(params.L1, params.L2, nmax=st["nmax"], include_zero=st["include_zero"])
    profile = cfg.profile(params)

    def member(sig):
        sp = st["sigma_plus"] if st["sigma_plus"] is not None else \
            (params.sigma_plus if params.sigma_plus > 0 else sig)
        if (sp > 0) != (sig > 0):
            sp = sig
        p = params.replace(sigma_minus=sig, sigma_plus=sp)
        out = []
        for xi in modes:
            op = assemble_mode_operator(xi, profile, p, grid,
                                        mass_constraints=st["mass_constraints"])
            lam = growth_rate(op, verify=st["verify"]).lambda_max
            out.append((xi[0], xi[1], sig, float(lam.real), float(lam.imag)))
        return out

    rows = [r for block in analysis.parallel_map(member, sig_list, cfg.threads) for r in block]
    w.csv("stability_map.csv", ("xi1", "xi2", "sigma_minus", "re_lambda_max", "im_lambda_max"),
          rows)
    per_sigma = {}
    for r in rows:
        per_sigma[r[2]] = max(per_sigma.get(r[2], -math.inf), r[3])
    verdict = {
        "jump": profile.jump,
        "sigma_c": profile.sigma_c if profile.jump > 0 else None,
        "sigma_star": None,
        "relative_error": None,
        "verdicts": [{"sigma_minus": s, "re_lambda_max": v,
                      "verdict": "unstable" if v > st["margin"] else
                      ("stable" if v < -st["margin"] else "marginal")}
                     for s, v in per_sigma.items()],
    }
    if profile.jump > 0:
        lowest = next(xi for xi in modes if xi[0] or xi[1])
        sigma_star = find_neutral_sigma(profile, params, grid, lowest)
        verdict["sigma_star"] = sigma_star
        verdict["relative_error"] = abs(sigma_star / profile.sigma_c - 1.0)
    if st["table"]:
        cells = analysis.stability_table(cfg.law("plus"), params, grid, st["table_jump"],
                                         st["table_alpha_minus"], st["nmax"], st["margin"],
                                         cfg.threads)
        w.csv("stability_table.csv",
              ("jump_sign", "row", "jump", "sigma_plus", "sigma_minus", "re_lambda_max",
               "verdict", "expected"),
              [(c.jump_sign, c.row, c.jump, c.sigma_plus, c.sigma_minus, c.re_lambda_max,
                c.verdict, c.expected) for c in cells])
        verdict["table"] = {"cells": [c.to_dict() for c in cells],
                            "all_match": all(c.match for c in cells)}
    w.json("verdict.json", verdict)
    return verdict


def _neutral_modes(cfg, params):
    nc = cfg["neutral"]
    if nc["modes"] is not None:
        return [(n1 / params.L1, n2 / params.L2) for n1, n2 in nc["modes"]]
    return lattice_modes(params.L1, params.L2, nmax=4)[:nc["count"]]


def _scenario_neutral_sigma(cfg, w):
    params = cfg.params()
    nc = cfg["neutral"]
    grid = cfg.grid(N_v=nc["N_v"])
    profile = cfg.profile(params)
    if not profile.jump > 0:
        raise ConfigError("law_minus", "neutral surface tension needs a positive density jump")
    modes = _neutral_modes(cfg, params)
    target = profile.jump * params.g

    def member(xi):
        bracket = nc["bracket"]
        tol = nc["tol"]
        sigma = find_neutral_sigma(profile, params, grid, xi, bracket=bracket, tol=tol)
        k2 = xi[0] ** 2 + xi[1] ** 2
        return {"n": _mode_index(xi, params), "xi": list(xi), "sigma_star": sigma,
                "predicted": target / k2, "law_value": sigma * k2,
                "relative_error": abs(sigma * k2 / target - 1.0)}

    results = analysis.parallel_map(member, modes, cfg.threads)
    w.csv("neutral_sigma.csv",
          ("n1", "n2", "xi1", "xi2", "sigma_star", "predicted", "relative_error"),
          [(r["n"][0], r["n"][1], r["xi"][0], r["xi"][1], r["sigma_star"], r["predicted"],
            r["relative_error"]) for r in results])
    lowest = min(results, key=lambda r: r["xi"][0] ** 2 + r["xi"][1] ** 2)
    verdict = {
        "sigma_c": profile.sigma_c,
        "sigma_star": lowest["sigma_star"],
        "relative_error": abs(lowest["sigma_star"] / profile.sigma_c - 1.0),
        "max_law_error": max(r["relative_error"] for r in results),
        "N_v": nc["N_v"],
        "modes": results,
    }
    w.json("verdict.json", verdict)
    return verdict


def initial_state_for(sim, cfg):
    """Initial data described by the ``simulation`` block."""
    s = cfg["simulation"]
    if s["eigenmode"] is not None:
        state, _ = sim.eigenmode_state(tuple(s["eigenmode"]), s["amplitude"])
        return state
    return sim.initial_state([{**m, "n": tuple(m["n"])} for m in s["eta_modes"]],
                             [{**m, "n": tuple(m["n"])} for m in s["u_modes"]],
                             random_u=s["random_u"], seed=cfg.seed, consistent=s["consistent"])


def _simulate(cfg, w):
    params = cfg.params()
    grid = cfg.grid()
    profile = cfg.profile(params)
    s = cfg["simulation"]
    if s["tier"] not in TIERS:
        raise ConfigError("simulation.tier", f"implemented tiers are {TIERS}")
    sim = Simulator(profile, params, grid, s["dt"], s["scheme"], mass_fix=s["mass_fix"],
                    remainder=s["remainder"])
    state = initial_state_for(sim, cfg)
    every = s["checkpoint_every"]
    if every:
        w.state("checkpoints/step_000000.bin", state, {"step": 0})

    def checkpoint(k, st):
        if every and k % every == 0:
            w.state(f"checkpoints/step_{k:06d}.bin", st, {"step": k})

    traj = sim.run(state, s["steps"], tier=s["tier"], record_every=s["record_every"],
                   callback=checkpoint)
    note = SURROGATE_NOTE.format(tier=s["tier"])
    w.csv("series.csv", traj.COLUMNS, traj.rows(), comment=note)
    drift = traj.relative_mass_drift()
    res = [abs(r) for r in traj.residual if math.isfinite(r)]
    summary = {
        "steps_completed": int(round((traj.t[-1] - traj.t[0]) / s["dt"])) if traj.t else 0,
        "final_time": traj.t[-1] if traj.t else 0.0,
        "breakdown": traj.breakdown,
        "relative_mass_drift": list(drift),
        "max_abs_residual": max(res) if res else None,
        "jump": profile.jump,
        "sigma_c": profile.sigma_c,
        "surrogate_note": note,
    }
    return traj, summary


def _scenario_simulate(cfg, w):
    _, summary = _simulate(cfg, w)
    w.json("summary.json", summary)
    return summary


def _scenario_decay_fit(cfg, w):
    traj, summary = _simulate(cfg, w)
    d = cfg["decay"]
    values = traj.E if d["series"] == "E" else traj.physical_energy
    series = list(zip(traj.t, values))
    fit = analysis.fit_decay(series, d["model"], d["transient"])
    mono, inc = analysis.is_nonincreasing(series, d["transient"])
    out = {"fit": fit.to_dict(), "series": d["series"], "nonincreasing_after_transient": mono,
           "largest_increase": inc, "simulation": summary}
    other = "algebraic" if d["model"] == "exponential" else "exponential"
    out["alternative_fit"] = analysis.fit_decay(series, other, d["transient"]).to_dict()
    p = cfg.params()
    try:
        out["M_factor"] = analysis.decay_rate_factor(p.sigma_plus, p.sigma_minus,
                                                     summary["jump"], summary["sigma_c"])
    except RTWaveError:
        out["M_factor"] = None
    w.json("decay.json", out)
    return out


def _scenario_verify(cfg, w):
    params = cfg.params()
    grid = cfg.grid()
    q = cfg["inequalities"]
    profile = cfg.profile(params)
    vand = analysis.vandermonde_check(q["vandermonde_m"])
    kernel = analysis.deviatoric_kernel_check(grid, q["kernel_samples"], cfg.seed)
    korn = analysis.korn_constant_estimate(grid, params, q["korn_nmax"], threads=cfg.threads)
    korn_fine = analysis.korn_constant_estimate(grid.refined(q["korn_extra"]), params,
                                                q["korn_nmax"], threads=cfg.threads)
    korn_free = analysis.korn_constant_estimate(grid, params, q["korn_nmax"], dirichlet=False,
                                                threads=cfg.threads)
    vc = vandermonde_coefficients(m=4)
    ext = []
    for which in ("upper", "lower"):
        for k, qq in enumerate(q["extension_q"]):
            ext.append(analysis.extension_bound_check(grid, qq, which, q["extension_samples"],
                                                      cfg.seed + k, vc))
    poincare = sharp_poincare_constant(grid)
    out = {
        "vandermonde": {"max_residual_by_m": vand, "passed": max(vand.values()) < 1e-10},
        "deviatoric_kernel": {"max_residual": kernel.max_residual, "samples": kernel.samples,
                              "constraint_rank": kernel.constraint_rank,
                              "annihilated": kernel.annihilated,
                              "unique_zero": kernel.unique_zero},
        "korn": {"minimum": korn.minimum, "minimum_refined": korn_fine.minimum,
                 "relative_change": abs(korn_fine.minimum / korn.minimum - 1.0)
                 if korn.minimum > 0 else None,
                 "positive": korn.minimum > 0,
                 "resolution_stable": korn.minimum > 0
                 and abs(korn_fine.minimum / korn.minimum - 1.0) <= 0.1,
                 "minimum_without_dirichlet": korn_free.minimum},
        "extension": [{"which": e.which, "q": e.q, "max_ratio": e.max_ratio, "bound": e.bound,
                       "bounded": e.bounded} for e in ext],
        "poincare": {"constant": poincare, "expected": 1.0 / params.max_L_sq,
                     "error": abs(poincare - 1.0 / params.max_L_sq)},
    }
    if q["positivity"]:
        pos = energy_form_positivity(profile, params, grid)
        out["energy_positivity"] = {"minimum": pos.minimum, "argmin": pos.argmin,
                                    "positive": pos.positive}
    w.json("inequalities.json", out)
    return out


def _scenario_sigma_limit(cfg, w):
    report = analysis.sigma_limit_experiment(cfg, threads=cfg.threads)
    w.csv("sigma_limit.csv", ("sigma", "distance"), list(zip(report.sigmas, report.distances)))
    out = report.to_dict()
    w.json("sigma_limit.json", out)
    return out


SCENARIO_FUNCS = {
    "equilibrium": _scenario_equilibrium,
    "stability-map": _scenario_stability_map,
    "neutral-sigma": _scenario_neutral_sigma,
    "simulate": _scenario_simulate,
    "decay-fit": _scenario_decay_fit,
    "verify-inequalities": _scenario_verify,
    "sigma-limit": _scenario_sigma_limit,
}


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------
def execute(cfg: ExperimentConfig, output_dir=None):
    """Run the scenario and publish its outputs; errors propagate.

    An existing output directory is replaced only if it holds a previous
    run (a ``MANIFEST.json``) or is empty.
    """
    out = Path(output_dir or cfg.output_dir).resolve()
    if out.exists() and (not out.is_dir() or
                         (any(out.iterdir()) and not (out / "MANIFEST.json").exists())):
        raise ConfigError("output_dir", f"{out} exists and does not hold a previous run")
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        w = _Writer(stage)
        summary = SCENARIO_FUNCS[cfg.scenario](cfg, w)
        (stage / "MANIFEST.json").write_text(
            json.dumps(_jsonable(_manifest(cfg, w)), indent=2, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        stage.rename(out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return RunResult(out, _jsonable(summary), sorted(set(w.files)))


def run(config, output_dir=None, stream=None):
    """Run a validated config; returns a process exit status.

    ``0`` on success, ``2`` for configuration errors and ``1`` for scenario
    failures.  Messages go to ``stream`` (standard error by default).
    """
    stream = stream or sys.stderr
    try:
        execute(config, output_dir)
    except ConfigError as exc:
        print(f"rtwave: configuration error: {exc}", file=stream)
        return 2
    except (RTWaveError, ValueError, ArithmeticError, OSError) as exc:
        print(f"rtwave: {config.scenario} failed: {type(exc).__name__}: {exc}", file=stream)
        return 1
    return 0
