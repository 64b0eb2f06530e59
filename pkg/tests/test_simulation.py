import math

import numpy as np
import pytest

from rtwave.errors import ConfigError, GeometryBreakdownError, StateValidityError
from rtwave.equilibrium import PressureLaw
from rtwave.geometry import build_theta
from rtwave.simulation import (FlattenedState, Simulator, energy_functionals, nonlinear_terms,
                               state_distance, state_norm, step, taylor_remainder)
from rtwave.spectral import VolumeField


def _const(grid, plus, minus):
    shape = lambda layer: (grid.N_h, grid.N_h, grid.nz(layer))
    return VolumeField.from_physical(np.full(shape("plus"), plus), np.full(shape("minus"), minus),
                                     grid)


def _scale(state, a):
    return FlattenedState(state.q * a, state.u * a, state.eta_plus.replace(state.eta_plus.coeffs * a),
                          state.eta_minus.replace(state.eta_minus.coeffs * a), state.time)


@pytest.fixture(scope="module")
def sim(stable, small_grid):
    profile, params = stable
    return Simulator(profile, params, small_grid, 0.05, "imex2")


def test_zero_state_is_fixed_point(stable, small_grid):
    profile, params = stable
    z = FlattenedState.zeros(small_grid)
    for scheme in ("imex1", "imex2"):
        s = z
        for _ in range(3):
            s = step(s, 0.1, None, profile, params, scheme)
        assert state_norm(s) < 1e-13
        assert s.time == pytest.approx(0.3)


def test_taylor_remainder_polytropic(stable, small_grid):
    profile, _ = stable
    zero = VolumeField.zeros(small_grid)
    s0 = 0.013
    q = _const(small_grid, s0, s0)
    R = taylor_remainder(q, zero, profile)
    # alpha = 2 gives P'' = 2 K, so R = K s^2 exactly
    np.testing.assert_allclose(R.physical()[0], 1.0 * s0**2, rtol=1e-12)
    np.testing.assert_allclose(R.physical()[1], profile.law("minus").K * s0**2, rtol=1e-12)
    half = taylor_remainder(q * 0.5, zero, profile)
    np.testing.assert_allclose(half.physical()[0], R.physical()[0] / 4, rtol=1e-12)


def test_taylor_remainder_general_law(small_grid, stable):
    profile, _ = stable
    laws = {"plus": PressureLaw.polytropic(1.0, 3.0), "minus": PressureLaw.polytropic(0.36, 3.0)}
    zero = VolumeField.zeros(small_grid)
    q = _const(small_grid, 0.1, 0.1)
    g = taylor_remainder(q, zero, profile, laws)
    a = taylor_remainder(q, zero, profile, laws, method="adaptive")
    np.testing.assert_allclose(g.physical()[0], a.physical()[0], rtol=1e-12)
    # closed form for P = K z^3: P(r+s) - P(r) - P'(r) s = K (3 r s^2 + s^3)
    rho, _, _ = profile.derivatives("plus", small_grid.z("plus"))
    np.testing.assert_allclose(g.physical()[0][0, 0], 3 * rho * 0.01 + 0.001, rtol=1e-12)


def test_remainder_rejects_nonpositive_density(stable, small_grid):
    profile, _ = stable
    q = _const(small_grid, -100.0, 0.0)
    with pytest.raises(StateValidityError):
        taylor_remainder(q, VolumeField.zeros(small_grid), profile)


def test_nonlinear_terms_zero_and_quadratic(stable, sim):
    profile, params = stable
    z = FlattenedState.zeros(sim.grid)
    for name, val in nonlinear_terms(z, None, profile, params).norms().items():
        assert val < 1e-14, name
    base = sim.initial_state(eta_modes=[{"n": (1, 0), "plus": 1.0, "minus": 0.5}],
                             random_u=1.0, consistent=False)
    sizes = []
    for a in (1e-3, 5e-4):
        n = nonlinear_terms(_scale(base, a), None, profile, params).norms()
        sizes.append(sum(n.values()))
    assert sizes[0] / sizes[1] == pytest.approx(4.0, rel=0.02)


def test_flat_interfaces_have_no_curvature_forcing(stable, sim):
    profile, params = stable
    s = sim.initial_state(random_u=1e-3, consistent=False)
    nl = nonlinear_terms(s, None, profile, params)
    assert np.max(np.abs(nl.G32_plus)) == 0.0 and np.max(np.abs(nl.G32_minus)) == 0.0


def test_consistent_initial_state_and_mass(sim):
    s0 = sim.initial_state(eta_modes=[{"n": (1, 0), "plus": 1e-3, "minus": 5e-4}], random_u=1e-3)
    traj = sim.run(s0, 20)
    assert traj.breakdown is None
    assert max(traj.relative_mass_drift()) < 1e-8
    assert len(traj.t) == 21 and traj.t[-1] == pytest.approx(1.0)
    assert all(math.isnan(r) for r in traj.residual[:2])


def test_energy_of_zero_state(stable, small_grid):
    profile, params = stable
    rep = energy_functionals(FlattenedState.zeros(small_grid), None, profile, params)
    assert rep.E_n_sigma == 0.0 and rep.D_n_sigma == 0.0
    assert abs(rep.physical_energy) < 1e-12
    assert math.isnan(rep.energy_law_residual)


def test_tier_validation(stable, small_grid, sim):
    profile, params = stable
    with pytest.raises(ConfigError):
        energy_functionals(FlattenedState.zeros(small_grid), None, profile, params, n=2)
    with pytest.raises(ConfigError):
        sim.run(FlattenedState.zeros(small_grid), 1, tier=3)
    with pytest.raises(ConfigError):
        Simulator(profile, params, small_grid, 0.1, "rk4")


def test_large_data_breaks_down(stable, sim):
    big = sim.initial_state(eta_modes=[{"n": (1, 0), "plus": 0.9}], consistent=False)
    with pytest.raises(GeometryBreakdownError):
        sim.step(big)


def test_state_distance(sim):
    a = sim.initial_state(random_u=1e-3, consistent=False)
    assert state_distance(a, a) == 0.0
    assert state_distance(a, FlattenedState.zeros(sim.grid)) == pytest.approx(state_norm(a))


def test_geometry_rebuilt_when_missing(stable, sim):
    profile, params = stable
    s = sim.initial_state(eta_modes=[{"n": (1, 1), "plus": 1e-3}], consistent=False)
    a = nonlinear_terms(s, None, profile, params).norms()
    b = nonlinear_terms(s, build_theta(s.eta_plus, s.eta_minus, s.grid), profile, params).norms()
    assert a == b
