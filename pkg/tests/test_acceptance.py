"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``).
"""
import math
import sys

import numpy as np
import pytest

from rtwave.equilibrium import (PhysicalParams, PressureLaw, build_equilibrium,
                                critical_surface_tension, equilibrium_masses)
from rtwave.geometry import vandermonde_coefficients
from rtwave.harness import (deviatoric_kernel_check, execute, extension_bound_check,
                            fit_decay, is_nonincreasing, korn_constant_estimate, parse_config,
                            sigma_limit_experiment, stability_table)
from rtwave.simulation import Simulator
from rtwave.spectral import Grid
from rtwave.stability import assemble_mode_operator, growth_rate, sharp_poincare_constant

POLY = PressureLaw.polytropic
LAW_PLUS = POLY(1.0, 2.0)


@pytest.fixture
def report(request):
    tr = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(criterion, ok, detail):
        line = f"[acceptance {criterion:>2}] {'PASS' if ok else 'FAIL'}: {detail}"
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
        assert ok, line
    return emit


def _setup(K_minus, sigma=(0.0, 0.0), N_v=16, N_h=8):
    params = PhysicalParams(sigma_plus=sigma[0], sigma_minus=sigma[1])
    profile = build_equilibrium(LAW_PLUS, POLY(K_minus, 2.0), params)
    return profile, params, Grid(1.0, 1.0, N_h, N_v, N_v, 1.0, 1.0)


def _base(scenario, K_minus, **blocks):
    data = {"scenario": scenario, "seed": 0, "physical": {}, "law_plus": {"K": 1.0},
            "law_minus": {"K": K_minus}, "grid": {}, "simulation": {}}
    for name, upd in blocks.items():
        data.setdefault(name, {}).update(upd)
    return parse_config(data)


def test_01_critical_surface_tension(report, tmp_path):
    cfg = _base("neutral-sigma", 9.0, neutral={"N_v": 64, "count": 4})
    summary = execute(cfg, tmp_path / "neutral").summary
    sig_c = critical_surface_tension(1.0, 1.0, 1.0, 1.0)
    rel = abs(summary["sigma_star"] / sig_c - 1.0)
    law = summary["max_law_error"]
    report(1, rel <= 0.02 and law <= 0.02 and len(summary["modes"]) == 4,
           f"sigma*/sigma_c - 1 = {rel:.2e}, worst per-mode law error over 4 modes = {law:.2e}")


def test_02_sharp_poincare_constant(report):
    errs = []
    for L1, L2 in ((1.0, 1.0), (3.0, 2.0), (0.5, 1.7)):
        c = sharp_poincare_constant(Grid(L1, L2, 8, 8, 8))
        errs.append(abs(c - 1.0 / max(L1, L2) ** 2))
    report(2, max(errs) <= 1e-12, f"max |C - 1/max(L^2)| over 3 periods = {max(errs):.1e}")


def test_03_stability_table(report):
    grid = Grid(1.0, 1.0, 8, 16, 16, 1.0, 1.0)
    cells = stability_table(LAW_PLUS, PhysicalParams(), grid, jump=1.0, nmax=2, margin=1e-6)
    bad = [f"{c.jump_sign:+d}/{c.row}: {c.verdict} (expected {c.expected})"
           for c in cells if not c.match]
    report(3, not bad and len(cells) == 9,
           "all 9 cells match" if not bad else "mismatches: " + "; ".join(bad))


@pytest.fixture(scope="module")
def stable_negative_jump_run():
    profile, params, grid = _setup(0.36)
    sim = Simulator(profile, params, grid, 0.05, "imex2")
    s0 = sim.initial_state(eta_modes=[{"n": (1, 0), "plus": 1e-3, "minus": 2e-3}],
                           random_u=1e-3)
    return sim.run(s0, 1000)


def test_04_mass_conservation(report, stable_negative_jump_run):
    traj = stable_negative_jump_run
    drift = max(traj.relative_mass_drift())
    report(4, traj.breakdown is None and len(traj.t) == 1001 and drift < 1e-8,
           f"relative mass drift over 1000 steps at dt = 0.05: {drift:.2e}")


def _residual_rms(scheme, dt, T=0.4, window=0.2):
    profile, params, grid = _setup(0.36)
    sim = Simulator(profile, params, grid, dt, scheme)
    s0 = sim.initial_state(eta_modes=[{"n": (1, 0), "plus": 1e-4, "minus": 2e-4}])
    traj = sim.run(s0, int(round(T / dt)))
    t, r = np.asarray(traj.t), np.asarray(traj.residual)
    return float(np.sqrt(np.mean(r[t >= window - 1e-12] ** 2)))


def test_05_energy_law_residual(report):
    dts = (0.02, 0.01, 0.005)
    ok, parts = True, []
    for scheme, target, tol in (("imex1", 2.0, 0.3), ("imex2", 4.0, 0.6)):
        res = [_residual_rms(scheme, dt) for dt in dts]
        ratios = [a / b for a, b in zip(res, res[1:])]
        ok &= all(abs(q - target) <= tol for q in ratios)
        parts.append(f"{scheme} ratios " + ", ".join(f"{q:.3f}" for q in ratios))
    report(5, ok, "; ".join(parts) + " at dt = 0.02, 0.01, 0.005")


def test_06_decay_character(report, stable_negative_jump_run):
    profile, params, grid = _setup(9.0, sigma=(1.0, 2.0))
    sim = Simulator(profile, params, grid, 0.1, "imex2")
    s0 = sim.initial_state(eta_modes=[{"n": (1, 0), "plus": 1e-3, "minus": 2e-3}],
                           random_u=1e-3)
    traj = sim.run(s0, 1000)
    exp_fit = fit_decay(np.c_[traj.t, traj.E], "exponential", 0.2)
    zero = stable_negative_jump_run
    series = np.c_[zero.t, zero.E]
    mono, inc = is_nonincreasing(series, 0.2)
    alg = fit_decay(series, "algebraic", 0.2)
    ok = traj.breakdown is None and exp_fit.r_squared > 0.98 and mono and alg.exponent > 0
    report(6, ok, f"sigma > sigma_c: exponential R^2 = {exp_fit.r_squared:.6f}; "
                  f"sigma = 0, negative jump: nonincreasing = {mono} (largest step {inc:.1e}), "
                  f"algebraic exponent = {alg.exponent:.3f}")


def test_07_vanishing_surface_tension(report):
    cfg = _base("sigma-limit", 0.36,
                simulation={"dt": 0.05, "steps": 100, "scheme": "imex1", "random_u": 1e-3,
                            "eta_modes": [{"n": [1, 0], "plus": 1e-3, "minus": 2e-3}]})
    rep = sigma_limit_experiment(cfg, [0.1, 0.05, 0.025])
    ok = rep.complete and rep.monotone and rep.order is not None and rep.order > 0
    report(7, ok, "distances " + ", ".join(f"{d:.3e}" for d in rep.distances)
           + f"; fitted order p = {rep.order:.3f}")


def _modal_rate(K_minus, sigma):
    profile, params, grid = _setup(K_minus, sigma)
    lam = growth_rate(assemble_mode_operator((1.0, 0.0), profile, params, grid)).re_lambda_max
    sim = Simulator(profile, params, grid, 0.02, "imex2")
    cur, _ = sim.eigenmode_state((1, 0), 1e-6)
    t, amp = [], []
    for k in range(251):
        if k:
            cur = sim.step(cur)
        t.append(cur.time)
        amp.append(abs(cur.eta_plus.coeffs[1, 0]))
    return lam, float(np.polyfit(t, np.log(amp), 1)[0])


def test_08_linear_nonlinear_consistency(report):
    parts, ok = [], True
    for label, K_minus, sigma in (("unstable", 9.0, (0.0, 0.0)), ("stable", 9.0, (1.0, 2.0))):
        lam, rate = _modal_rate(K_minus, sigma)
        rel = abs(rate / lam - 1.0)
        ok &= rel <= 0.03
        parts.append(f"{label}: eigen {lam:.6f}, simulated {rate:.6f}, rel {rel:.1e}")
    report(8, ok, "; ".join(parts))


def test_09_structural_checks(report):
    vander = max(float(np.max(np.abs(vandermonde_coefficients(m=m).residuals())))
                 for m in range(0, 7))
    coarse = Grid(1.0, 1.0, 8, 16, 16, 1.0, 1.0)
    kernel = deviatoric_kernel_check(coarse, samples=20)
    k16 = korn_constant_estimate(coarse).minimum
    k32 = korn_constant_estimate(Grid(1.0, 1.0, 8, 32, 32, 1.0, 1.0)).minimum
    korn_ok = k16 > 0 and k32 > 0 and abs(k32 / k16 - 1.0) <= 0.10
    ext = [extension_bound_check(coarse, q, which, samples=100)
           for q in (0, 1, 2) for which in ("upper", "lower")]
    ok = vander <= 1e-10 and kernel.annihilated and kernel.unique_zero and korn_ok \
        and all(e.bounded for e in ext)
    worst = max(e.max_ratio / e.bound for e in ext)
    report(9, ok, f"Vandermonde residual {vander:.1e}; kernel residual {kernel.max_residual:.1e} "
                  f"(rank {kernel.constraint_rank}/10); Korn {k16:.6f} -> {k32:.6f}; "
                  f"worst extension ratio / bound {worst:.3f}")


def test_10_equilibrium_formulas(report):
    gap = 0.0
    for K_minus in (9.0, 1.0, 0.36):
        params = PhysicalParams()
        a = build_equilibrium(LAW_PLUS, POLY(K_minus, 2.0), params, 64, "closed")
        b = build_equilibrium(LAW_PLUS, POLY(K_minus, 2.0), params, 64, "inversion")
        for x, y in ((a.rho_plus, b.rho_plus), (a.rho_minus, b.rho_minus)):
            gap = max(gap, float(np.max(np.abs(x - y) / np.abs(y))))
    m = equilibrium_masses(build_equilibrium(LAW_PLUS, LAW_PLUS, PhysicalParams()))
    five = 5 * math.pi**2
    mass_err = max(abs(m.M_plus / five - 1), abs(m.M_plus_closed / five - 1))
    report(10, gap <= 1e-10 and mass_err <= 1e-8,
           f"closed vs inversion {gap:.1e}; M+ relative error {mass_err:.1e} (both paths)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
