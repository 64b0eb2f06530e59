"""Experiment configuration: parsing, defaults and validation.

Configs are TOML files (``key = value`` lines under ``[section]`` headers,
dotted keys allowed) or JSON files with the same structure.  Parsing follows
the TOML 1.0 rules exactly: floats are decimal literals rounded to the
nearest double, integers are exact, and a float key given an integer literal
is converted with ``float``.  Every block has defaults; unknown keys are
rejected so that typos surface as errors naming the offending field.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from ..equilibrium import PhysicalParams, PressureLaw, build_equilibrium
from ..errors import ConfigError
from ..spectral import Grid

__all__ = ["SCENARIOS", "ExperimentConfig", "load_config", "parse_config", "DEFAULTS"]

SCENARIOS = ("equilibrium", "stability-map", "neutral-sigma", "simulate", "decay-fit",
             "verify-inequalities", "sigma-limit")

_LAW = {"kind": "polytropic", "K": 1.0, "alpha": 2.0, "density": None, "pressure": None}

DEFAULTS = {
    "physical": {"g": 1.0, "p_atm": 1.0, "ell": 1.0, "b": 1.0, "L1": 1.0, "L2": 1.0,
                 "mu_plus": 1.0, "mu_minus": 1.0, "mu_prime_plus": 0.0, "mu_prime_minus": 0.0,
                 "sigma_plus": 0.0, "sigma_minus": 0.0},
    "law_plus": dict(_LAW),
    "law_minus": dict(_LAW),
    "grid": {"N_h": 8, "N_v_plus": 16, "N_v_minus": 16},
    "equilibrium": {"n_samples": 64, "method": "closed"},
    "stability": {"nmax": 2, "sigma_minus": None, "sigma_plus": None, "include_zero": False,
                  "mass_constraints": False, "verify": False, "table": False,
                  "table_jump": 1.0, "table_alpha_minus": 2.0, "margin": 1e-6},
    "neutral": {"modes": None, "count": 4, "N_v": 64, "tol": None, "bracket": None},
    "simulation": {"dt": 0.05, "steps": 100, "scheme": "imex1", "tier": 0, "record_every": 1,
                   "checkpoint_every": 0, "mass_fix": False, "remainder": "gauss",
                   "eta_modes": [], "u_modes": [], "random_u": 0.0, "consistent": True,
                   "eigenmode": None, "amplitude": 1e-6},
    "decay": {"model": "exponential", "transient": 0.2, "series": "E"},
    "sigma_limit": {"sigmas": [0.1, 0.05, 0.025]},
    "inequalities": {"vandermonde_m": 6, "kernel_samples": 20, "korn_extra": 8,
                     "korn_nmax": 2, "extension_samples": 100, "extension_q": [0.0, 1.0, 2.0],
                     "positivity": True},
}

# blocks that must appear explicitly in the config for each scenario
REQUIRED = {
    "equilibrium": ("physical", "law_plus", "law_minus"),
    "stability-map": ("physical", "law_plus", "law_minus", "grid"),
    "neutral-sigma": ("physical", "law_plus", "law_minus"),
    "simulate": ("physical", "law_plus", "law_minus", "grid", "simulation"),
    "decay-fit": ("physical", "law_plus", "law_minus", "grid", "simulation"),
    "verify-inequalities": ("physical", "law_plus", "law_minus", "grid"),
    "sigma-limit": ("physical", "law_plus", "law_minus", "grid", "simulation"),
}

_TOP = {"scenario", "seed", "output_dir", "threads"}


def _merge(path, defaults, given):
    if not isinstance(given, dict):
        raise ConfigError(path, "expected a table of key = value entries")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"{path}.{key}", "unknown key")
        ref = defaults[key]
        if isinstance(ref, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}.{key}", f"expected true/false, got {value!r}")
        elif isinstance(ref, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}.{key}", f"expected an integer, got {value!r}")
        elif isinstance(ref, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}.{key}", f"expected a number, got {value!r}")
            value = float(value)
        elif isinstance(ref, str):
            if not isinstance(value, str):
                raise ConfigError(f"{path}.{key}", f"expected a string, got {value!r}")
        out[key] = value
    return out


def _positive(path, value):
    if not (isinstance(value, (int, float)) and value > 0):
        raise ConfigError(path, f"must be positive, got {value!r}")


def _mode_pair(path, value):
    if (not isinstance(value, (list, tuple)) or len(value) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
        raise ConfigError(path, f"expected an integer pair [n1, n2], got {value!r}")
    return (int(value[0]), int(value[1]))


def _number_list(path, value, positive=False):
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(path, "expected a nonempty list of numbers")
    out = []
    for i, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}[{i}]", f"expected a number, got {v!r}")
        if positive and not v > 0:
            raise ConfigError(f"{path}[{i}]", f"must be positive, got {v!r}")
        out.append(float(v))
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description.

    ``blocks`` holds every parameter block with defaults filled in.
    """

    scenario: str
    seed: int
    output_dir: str
    threads: int
    blocks: dict = field(repr=False)

    def __getitem__(self, name):
        return self.blocks[name]

    # -- builders -------------------------------------------------------------
    def law(self, layer):
        path = f"law_{layer}"
        b = self.blocks[path]
        try:
            if b["kind"] == "polytropic":
                return PressureLaw.polytropic(b["K"], b["alpha"])
            return PressureLaw.tabulated(b["density"], b["pressure"])
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from exc

    def params(self, **overrides):
        p = dict(self.blocks["physical"])
        p.update(overrides)
        try:
            return PhysicalParams(**p)
        except ValueError as exc:
            raise ConfigError("physical", str(exc)) from exc

    def grid(self, N_v=None):
        p, g = self.blocks["physical"], self.blocks["grid"]
        nv_p = N_v if N_v is not None else g["N_v_plus"]
        nv_m = N_v if N_v is not None else g["N_v_minus"]
        try:
            return Grid(p["L1"], p["L2"], g["N_h"], nv_p, nv_m, p["ell"], p["b"])
        except ValueError as exc:
            raise ConfigError("grid", str(exc)) from exc

    def profile(self, params=None):
        e = self.blocks["equilibrium"]
        return build_equilibrium(self.law("plus"), self.law("minus"), params or self.params(),
                                 e["n_samples"], e["method"])

    def replace(self, **kw):
        """Copy with top-level fields or whole blocks replaced (blocks by name)."""
        top = {k: kw.pop(k) for k in list(kw) if k in _TOP}
        blocks = copy.deepcopy(self.blocks)
        for name, upd in kw.items():
            blocks[name] = {**blocks[name], **upd}
        data = {"scenario": self.scenario, "seed": self.seed, "output_dir": self.output_dir,
                "threads": self.threads, **top, **blocks}
        return parse_config(data, require=False)

    # -- provenance -----------------------------------------------------------
    def canonical(self):
        """Everything that influences results (excludes ``output_dir`` and ``threads``)."""
        return {"scenario": self.scenario, "seed": self.seed, **self.blocks}

    def hash(self):
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def parse_config(data, scenario=None, require=True):
    """Validate a raw mapping into an :class:`ExperimentConfig`.

    ``scenario`` overrides the mapping's ``scenario`` key.  With ``require``
    the blocks needed by the scenario must be present explicitly.
    """
    if not isinstance(data, dict):
        raise ConfigError("", "configuration must be a table")
    for key in data:
        if key not in _TOP and key not in DEFAULTS:
            raise ConfigError(key, "unknown key or block")
    scen = scenario or data.get("scenario")
    if scen is None:
        raise ConfigError("scenario", "missing scenario")
    if scen not in SCENARIOS:
        raise ConfigError("scenario", f"unknown scenario {scen!r}; expected one of {SCENARIOS}")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"expected a nonnegative integer, got {seed!r}")
    threads = data.get("threads", 1)
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads", f"expected a positive integer, got {threads!r}")
    out_dir = data.get("output_dir", "rtwave-out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output_dir", "expected a nonempty path string")
    if require:
        for name in REQUIRED[scen]:
            if name not in data:
                raise ConfigError(name, f"block required by scenario {scen!r} is missing")
    blocks = {name: _merge(name, DEFAULTS[name], data.get(name, {})) for name in DEFAULTS}
    _validate(blocks)
    return ExperimentConfig(scen, seed, out_dir, threads, blocks)


def _validate(b):
    for key in ("g", "p_atm", "ell", "b", "L1", "L2", "mu_plus", "mu_minus"):
        _positive(f"physical.{key}", b["physical"][key])
    for key in ("mu_prime_plus", "mu_prime_minus", "sigma_plus", "sigma_minus"):
        if b["physical"][key] < 0:
            raise ConfigError(f"physical.{key}", "must be nonnegative")
    for layer in ("law_plus", "law_minus"):
        law = b[layer]
        if law["kind"] == "polytropic":
            _positive(f"{layer}.K", law["K"])
            if not law["alpha"] > 1:
                raise ConfigError(f"{layer}.alpha", "must exceed 1")
        elif law["kind"] == "tabulated":
            d = _number_list(f"{layer}.density", law["density"], positive=True)
            p = _number_list(f"{layer}.pressure", law["pressure"], positive=True)
            if len(d) != len(p):
                raise ConfigError(f"{layer}.pressure", "must have the same length as density")
            law["density"], law["pressure"] = d, p
        else:
            raise ConfigError(f"{layer}.kind", f"expected 'polytropic' or 'tabulated', "
                                               f"got {law['kind']!r}")
    g = b["grid"]
    if g["N_h"] < 4 or g["N_h"] % 2:
        raise ConfigError("grid.N_h", "must be even and at least 4")
    for key in ("N_v_plus", "N_v_minus"):
        if g[key] < 8 or g[key] % 2:
            raise ConfigError(f"grid.{key}", "must be even and at least 8")
    e = b["equilibrium"]
    if e["n_samples"] < 2:
        raise ConfigError("equilibrium.n_samples", "must be at least 2")
    if e["method"] not in ("closed", "inversion"):
        raise ConfigError("equilibrium.method", "expected 'closed' or 'inversion'")
    s = b["stability"]
    if s["nmax"] < 1:
        raise ConfigError("stability.nmax", "must be at least 1")
    if s["sigma_minus"] is not None:
        s["sigma_minus"] = _number_list("stability.sigma_minus", s["sigma_minus"])
        if any(v < 0 for v in s["sigma_minus"]):
            raise ConfigError("stability.sigma_minus", "entries must be nonnegative")
    if s["sigma_plus"] is not None:
        if isinstance(s["sigma_plus"], bool) or not isinstance(s["sigma_plus"], (int, float)) \
                or s["sigma_plus"] < 0:
            raise ConfigError("stability.sigma_plus", "expected a nonnegative number")
        s["sigma_plus"] = float(s["sigma_plus"])
    _positive("stability.margin", s["margin"])
    _positive("stability.table_jump", s["table_jump"])
    if not s["table_alpha_minus"] > 1:
        raise ConfigError("stability.table_alpha_minus", "must exceed 1")
    n = b["neutral"]
    if n["modes"] is not None:
        if not isinstance(n["modes"], list) or not n["modes"]:
            raise ConfigError("neutral.modes", "expected a nonempty list of [n1, n2] pairs")
        n["modes"] = [list(_mode_pair(f"neutral.modes[{i}]", m)) for i, m in enumerate(n["modes"])]
        if any(m == [0, 0] for m in n["modes"]):
            raise ConfigError("neutral.modes", "the zero mode has no neutral surface tension")
    if n["count"] < 1:
        raise ConfigError("neutral.count", "must be at least 1")
    if n["N_v"] < 8 or n["N_v"] % 2:
        raise ConfigError("neutral.N_v", "must be even and at least 8")
    if n["tol"] is not None:
        _positive("neutral.tol", n["tol"])
        n["tol"] = float(n["tol"])
    if n["bracket"] is not None:
        br = _number_list("neutral.bracket", n["bracket"], positive=True)
        if len(br) != 2 or not br[0] < br[1]:
            raise ConfigError("neutral.bracket", "expected [lo, hi] with 0 < lo < hi")
        n["bracket"] = br
    _validate_simulation(b["simulation"])
    d = b["decay"]
    if d["model"] not in ("exponential", "algebraic"):
        raise ConfigError("decay.model", "expected 'exponential' or 'algebraic'")
    if not 0 <= d["transient"] < 1:
        raise ConfigError("decay.transient", "must lie in [0, 1)")
    if d["series"] not in ("E", "physical_energy"):
        raise ConfigError("decay.series", "expected 'E' or 'physical_energy'")
    sl = _number_list("sigma_limit.sigmas", b["sigma_limit"]["sigmas"], positive=True)
    if any(a <= c for a, c in zip(sl, sl[1:])):
        raise ConfigError("sigma_limit.sigmas", "must be strictly decreasing")
    b["sigma_limit"]["sigmas"] = sl
    q = b["inequalities"]
    if not 1 <= q["vandermonde_m"] <= 12:
        raise ConfigError("inequalities.vandermonde_m", "must lie in 1..12")
    for key in ("kernel_samples", "korn_extra", "korn_nmax", "extension_samples"):
        if q[key] < 1:
            raise ConfigError(f"inequalities.{key}", "must be at least 1")
    q["extension_q"] = _number_list("inequalities.extension_q", q["extension_q"])
    if any(v < 0 for v in q["extension_q"]):
        raise ConfigError("inequalities.extension_q", "entries must be nonnegative")


def _validate_simulation(s):
    _positive("simulation.dt", s["dt"])
    if s["steps"] < 1:
        raise ConfigError("simulation.steps", "must be at least 1")
    if s["scheme"] not in ("imex1", "imex2"):
        raise ConfigError("simulation.scheme", "expected 'imex1' or 'imex2'")
    if s["tier"] not in (0, 1):
        raise ConfigError("simulation.tier", "implemented tiers are 0 and 1")
    if s["record_every"] < 1:
        raise ConfigError("simulation.record_every", "must be at least 1")
    if s["checkpoint_every"] < 0:
        raise ConfigError("simulation.checkpoint_every", "must be nonnegative")
    if s["remainder"] not in ("gauss", "adaptive"):
        raise ConfigError("simulation.remainder", "expected 'gauss' or 'adaptive'")
    if s["random_u"] < 0:
        raise ConfigError("simulation.random_u", "must be nonnegative")
    _positive("simulation.amplitude", s["amplitude"])
    for name, keys in (("eta_modes", {"n", "plus", "minus", "phase"}),
                       ("u_modes", {"n", "amp", "phase"})):
        modes = s[name]
        if not isinstance(modes, list):
            raise ConfigError(f"simulation.{name}", "expected a list of tables")
        clean = []
        for i, m in enumerate(modes):
            path = f"simulation.{name}[{i}]"
            if not isinstance(m, dict):
                raise ConfigError(path, "expected a table")
            for key in m:
                if key not in keys:
                    raise ConfigError(f"{path}.{key}", "unknown key")
            if "n" not in m:
                raise ConfigError(f"{path}.n", "missing mode index")
            entry = {"n": list(_mode_pair(f"{path}.n", m["n"]))}
            for key in keys - {"n", "amp"}:
                if key in m:
                    entry[key] = _number_list(f"{path}.{key}", [m[key]])[0]
            if name == "u_modes":
                amp = _number_list(f"{path}.amp", m.get("amp"))
                if len(amp) != 3:
                    raise ConfigError(f"{path}.amp", "expected three components")
                entry["amp"] = amp
            clean.append(entry)
        s[name] = clean
    if s["eigenmode"] is not None:
        s["eigenmode"] = list(_mode_pair("simulation.eigenmode", s["eigenmode"]))


def load_config(path, scenario=None, overrides=None):
    """Read a TOML (or ``.json``) config file and validate it.

    ``overrides`` replaces top-level keys (``seed``, ``output_dir``,
    ``threads``) before validation.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode())
        else:
            data = tomli.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    if overrides:
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    return parse_config(data, scenario)
