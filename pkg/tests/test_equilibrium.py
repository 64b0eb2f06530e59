import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtwave.equilibrium import (PhysicalParams, PressureLaw, build_equilibrium,
                                check_admissibility, critical_surface_tension, enthalpy,
                                equilibrium_masses, heights_from_masses, invert_enthalpy)
from rtwave.errors import AdmissibilityError, DomainCoverageError, DomainError

POLY = PressureLaw.polytropic


# -- pressure laws --------------------------------------------------------------
def test_polytropic_rejects_bad_parameters():
    with pytest.raises(ValueError):
        POLY(0.0, 2.0)
    with pytest.raises(ValueError):
        POLY(1.0, 1.0)


def test_tabulated_requires_monotone_table():
    with pytest.raises(ValueError):
        PressureLaw.tabulated([1, 2, 3, 4], [1, 3, 2, 4])


def test_enthalpy_hand_values():
    assert enthalpy(POLY(1, 2), 1.0, 3.0) == pytest.approx(4.0, rel=1e-12)
    assert enthalpy(POLY(2, 1.5), 1.0, 4.0) == pytest.approx(6.0, rel=1e-12)
    assert enthalpy(POLY(1, 2), 1.7, 1.7) == 0.0


def test_enthalpy_outside_domain():
    law = PressureLaw.tabulated([1, 2, 3, 4, 5], [1, 4, 9, 16, 25])
    with pytest.raises(DomainError):
        enthalpy(law, 1.0, 6.0)
    with pytest.raises(DomainError):
        enthalpy(POLY(1, 2), 1.0, -1.0)


def test_tabulated_enthalpy_matches_polytropic():
    d = np.linspace(0.2, 5.0, 400)
    law = PressureLaw.tabulated(d, d**2)
    assert enthalpy(law, 1.0, 3.0) == pytest.approx(4.0, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(K=st.floats(0.1, 10), alpha=st.floats(1.1, 4), z=st.floats(0.2, 5))
def test_enthalpy_closed_form_and_monotone(K, alpha, z):
    law = POLY(K, alpha)
    exact = K * alpha / (alpha - 1) * (z ** (alpha - 1) - 1.0)
    assert enthalpy(law, 1.0, z) == pytest.approx(exact, rel=1e-10, abs=1e-12)
    assert enthalpy(law, 1.0, z * 1.01) > enthalpy(law, 1.0, z)


@settings(max_examples=20, deadline=None)
@given(target=st.floats(0.0, 20.0))
def test_invert_enthalpy_roundtrip(target):
    law = POLY(1.5, 1.7)
    z = invert_enthalpy(law, 1.0, target)
    # closed-form inverse of K a/(a-1) (z^(a-1) - 1)
    exact = (1.0 + target * 0.7 / (1.5 * 1.7)) ** (1 / 0.7)
    assert z == pytest.approx(exact, rel=1e-11)


# -- admissibility ----------------------------------------------------------------
def test_polytropic_always_admissible():
    rep = check_admissibility(POLY(3, 1.4), POLY(0.5, 2.5), PhysicalParams(p_atm=7, ell=3, b=4))
    assert rep.ok
    assert rep.bound_ell == math.inf and rep.bound_b == math.inf


def test_condition_one_fails_for_truncated_table():
    law = PressureLaw.tabulated([1, 2, 3, 4], [1, 2, 3, 4])
    rep = check_admissibility(law, POLY(1, 2), PhysicalParams(p_atm=10.0))
    assert rep.passed[0] is False
    with pytest.raises(AdmissibilityError) as exc:
        build_equilibrium(law, POLY(1, 2), PhysicalParams(p_atm=10.0))
    assert exc.value.condition == 1


def test_condition_two_fails_with_integrable_enthalpy():
    # P(z) = 1 - 1/z on [1.05, 100]; p_atm = 0.5 gives rho1 = 2 and the bound
    # (1/g) int_2^100 r^-3 dr = (1/4 - 1/10000) / 2, computed by hand
    d = np.geomspace(1.05, 100.0, 600)
    law = PressureLaw.tabulated(d, 1.0 - 1.0 / d)
    rep = check_admissibility(law, POLY(1, 2), PhysicalParams(p_atm=0.5, ell=1.0))
    assert rep.passed[:2] == (True, False)
    assert rep.bound_ell == pytest.approx(0.5 * (0.25 - 1e-4), rel=1e-4)
    ok = check_admissibility(law, POLY(1, 2), PhysicalParams(p_atm=0.5, ell=0.1))
    assert ok.passed[1] is True


def test_domain_coverage_error():
    law = PressureLaw.tabulated([1, 2, 3, 4], [1, 2, 3, 4])
    with pytest.raises(DomainCoverageError):
        check_admissibility(law, POLY(1, 2), PhysicalParams(p_atm=4.0))


# -- profiles ----------------------------------------------------------------------
def test_upper_profile_closed_form():
    prof = build_equilibrium(POLY(1, 2), POLY(1, 2), PhysicalParams())
    assert prof.rho1 == pytest.approx(1.0, rel=1e-14)
    z = prof.z_plus
    np.testing.assert_allclose(prof.rho_plus, 1 + (1 - z) / 2, rtol=1e-13)
    assert prof.rho_top_of_interface == pytest.approx(1.5, rel=1e-14)
    assert prof.rho_bot_of_interface == pytest.approx(1.5, rel=1e-14)
    assert prof.jump == pytest.approx(0.0, abs=1e-14)


def test_positive_jump_and_sigma_c():
    prof = build_equilibrium(POLY(1, 2), POLY(9, 2), PhysicalParams())
    assert prof.rho_bot_of_interface == pytest.approx(0.5, rel=1e-13)
    assert prof.jump == pytest.approx(1.0, rel=1e-13)
    assert prof.sigma_c == pytest.approx(1.0, rel=1e-13)


def test_sigma_c_scaling():
    assert critical_surface_tension(2.0, 3.0, 1.0, 2.0) == pytest.approx(24.0)
    assert critical_surface_tension(2.0, 3.0, 2.0, 1.0) == critical_surface_tension(2.0, 3.0, 1.0, 2.0)
    assert critical_surface_tension(4.0, 3.0, 1.0, 2.0) == 2 * critical_surface_tension(2.0, 3.0, 1.0, 2.0)


@pytest.mark.parametrize("laws", [(POLY(1, 2), POLY(9, 2)), (POLY(2, 1.4), POLY(0.7, 1.8))])
def test_closed_form_matches_inversion(laws):
    p = PhysicalParams(ell=1.3, b=0.8)
    a = build_equilibrium(*laws, p, 32, "closed")
    b = build_equilibrium(*laws, p, 32, "inversion")
    np.testing.assert_allclose(a.rho_plus, b.rho_plus, rtol=1e-10)
    np.testing.assert_allclose(a.rho_minus, b.rho_minus, rtol=1e-10)


def test_profile_invariants():
    prof = build_equilibrium(POLY(2, 1.4), POLY(0.7, 1.8), PhysicalParams(g=2.0))
    assert np.all(np.diff(prof.rho_plus) < 0) and np.all(np.diff(prof.rho_minus) < 0)
    p_p = prof.law_plus.P(prof.rho_top_of_interface)
    p_m = prof.law_minus.P(prof.rho_bot_of_interface)
    assert p_p == pytest.approx(p_m, rel=1e-10)
    # hydrostatic balance dP/dx3 = -g rho through the analytic derivative
    for layer in ("plus", "minus"):
        z = prof.z_plus if layer == "plus" else prof.z_minus
        rho, d1, _ = prof.derivatives(layer, z[1:-1])
        np.testing.assert_allclose(prof.law(layer).dP(rho) * d1, -2.0 * rho, rtol=1e-10)


def test_tabulated_profile_matches_polytropic():
    d = np.linspace(0.3, 3.0, 300)
    tab = PressureLaw.tabulated(d, d**2)
    a = build_equilibrium(tab, POLY(9, 2), PhysicalParams(), 16)
    b = build_equilibrium(POLY(1, 2), POLY(9, 2), PhysicalParams(), 16)
    np.testing.assert_allclose(a.rho_plus, b.rho_plus, rtol=1e-5)


# -- masses --------------------------------------------------------------------------
def test_upper_mass_five_pi_squared():
    prof = build_equilibrium(POLY(1, 2), POLY(1, 2), PhysicalParams())
    rep = equilibrium_masses(prof)
    assert rep.M_plus == pytest.approx(5 * math.pi**2, rel=1e-12)
    assert rep.M_plus_closed == pytest.approx(5 * math.pi**2, rel=1e-12)
    assert rep.relative_gap() < 1e-8


def test_vanishing_layer_mass():
    prof = build_equilibrium(POLY(1, 2), POLY(1, 2), PhysicalParams(ell=1e-8))
    assert prof.M_plus < 1e-6


def test_heights_from_masses_roundtrip():
    p = PhysicalParams(ell=1.3, b=0.7)
    prof = build_equilibrium(POLY(1, 2), POLY(9, 2), p)
    ell, b = heights_from_masses(prof.M_plus, prof.M_minus, POLY(1, 2), POLY(9, 2),
                                 PhysicalParams())
    assert ell == pytest.approx(1.3, rel=1e-8)
    assert b == pytest.approx(0.7, rel=1e-8)


def test_profile_json_and_rows():
    prof = build_equilibrium(POLY(1, 2), POLY(9, 2), PhysicalParams(), 8)
    rows = prof.rows()
    assert len(rows) == 16 and rows[0][2] == "minus" and rows[-1][2] == "plus"
    assert '"sigma_c": 1.0' in prof.to_json()
