import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtwave.errors import SingularVandermondeError
from rtwave.geometry import (build_theta, cutoff_functions, extend_theta, extension_ratio_bound,
                             poisson_extend_lower, poisson_extend_upper, smallness_check,
                             vandermonde_coefficients)
from rtwave.spectral import Grid, SurfaceField, d_vertical, trace

G = Grid(1.0, 1.0, 8, 24, 24, 1.0, 1.0)


def _surface(fn, which="plus", grid=G):
    x1, x2 = grid.x_horizontal()
    return SurfaceField.from_physical(fn(x1[:, None], x2[None, :]), grid, which)


def _mode_surface(n1, n2, amp=1.0, which="plus", grid=G):
    return _surface(lambda x1, x2: amp * np.cos(n1 * x1 / grid.L1 + n2 * x2 / grid.L2), which, grid)


# -- Vandermonde ------------------------------------------------------------------
def test_vandermonde_hand_examples():
    assert vandermonde_coefficients([1.0, 2.0]).alphas == pytest.approx((3.0, -2.0), rel=1e-14)
    assert vandermonde_coefficients([1.0]).alphas == pytest.approx((1.0,))
    lam = np.array([1.0, 2.0, 3.0])
    # independent dense solve of V alpha = 1 with V_ij = (-lambda_j)^i
    V = np.array([(-lam) ** i for i in range(3)])
    expected = np.linalg.solve(V, np.ones(3))
    np.testing.assert_allclose(vandermonde_coefficients(lam).alphas, expected, rtol=1e-12)


@pytest.mark.parametrize("m", range(0, 7))
def test_vandermonde_identities(m):
    vc = vandermonde_coefficients(m=m)
    assert np.max(np.abs(vc.residuals())) < 1e-10


def test_vandermonde_rejects_repeats():
    with pytest.raises(SingularVandermondeError):
        vandermonde_coefficients([1.0, 1.0, 2.0])
    with pytest.raises(SingularVandermondeError):
        vandermonde_coefficients([0.0, 1.0])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.2, 6.0), min_size=2, max_size=5, unique=True))
def test_vandermonde_random_exponents(lams):
    lams = sorted(lams)
    if min(b - a for a, b in zip(lams, lams[1:])) < 0.3:
        return
    vc = vandermonde_coefficients(lams)
    assert np.max(np.abs(vc.residuals())) < 1e-10


# -- Poisson extensions -------------------------------------------------------------
def test_upper_extension_examples():
    c = poisson_extend_upper(_surface(lambda x1, x2: 2.5 + 0 * x1 + 0 * x2), G)
    np.testing.assert_allclose(c.physical()[0], 2.5, atol=1e-13)
    np.testing.assert_allclose(c.physical()[1], 2.5, atol=1e-13)
    e = poisson_extend_upper(_mode_surface(1, 0), G)
    x1, _, z = G.mesh("plus")
    np.testing.assert_allclose(e.physical()[0], np.cos(x1) * np.exp(z - 1.0), atol=1e-13)


def test_upper_extension_decay_ratio():
    g = Grid(1.0, 1.0, 8, 9 * 2, 8, 1.0, 1.0)
    f = _mode_surface(2, 0, grid=g)
    ext = poisson_extend_upper(f, g)
    # node closest to x3 = 0.5 on an even CGL grid is not exact: evaluate the profile
    z = g.z("plus")
    ratio = ext.data_plus[2, 0, :] / f.coeffs[2, 0]
    np.testing.assert_allclose(ratio, np.exp(2 * (z - 1.0)), rtol=1e-13)
    assert math.exp(2 * (0.5 - 1.0)) == pytest.approx(math.exp(-1))


def test_lower_extension_matches_derivatives():
    vc1 = vandermonde_coefficients([1.0, 2.0])
    f = _mode_surface(1, 1, which="minus")
    k = math.sqrt(2.0)
    up = [poisson_extend_lower(f, vc1, G, order=o).data_plus[1, 1, 0] for o in range(3)]
    lo = [poisson_extend_lower(f, vc1, G, order=o).data_minus[1, 1, -1] for o in range(3)]
    c = f.coeffs[1, 1]
    assert up[0] / c == pytest.approx(1.0) and lo[0] / c == pytest.approx(1.0)
    assert up[1] / c == pytest.approx(k) and lo[1] / c == pytest.approx(k)
    # second derivative above is (3 - 8) k^2, below k^2
    assert up[2] / c == pytest.approx(-5 * k * k)
    assert lo[2] / c == pytest.approx(k * k)


def test_lower_extension_matching_order_m4():
    vc = vandermonde_coefficients(m=4)
    f = _mode_surface(1, 0, which="minus")
    for o in range(5):
        ext = poisson_extend_lower(f, vc, G, order=o)
        assert ext.data_plus[1, 0, 0] == pytest.approx(ext.data_minus[1, 0, -1], rel=1e-10)


def test_lower_extension_constant():
    vc = vandermonde_coefficients(m=4)
    ext = poisson_extend_lower(_surface(lambda x1, x2: 1.5 + 0 * x1 + 0 * x2, "minus"), vc, G)
    np.testing.assert_allclose(ext.physical()[0], 1.5, atol=1e-12)
    np.testing.assert_allclose(ext.physical()[1], 1.5, atol=1e-12)


def test_extension_traces():
    rng = np.random.default_rng(4)
    f = SurfaceField.from_physical(rng.standard_normal((8, 8)), G)
    up = poisson_extend_upper(f, G)
    np.testing.assert_allclose(trace(up, "Sigma_plus").coeffs, f.coeffs, atol=1e-12)
    lo = poisson_extend_lower(f, vandermonde_coefficients(m=4), G)
    np.testing.assert_allclose(trace(lo, "Sigma_minus_plus").coeffs, f.coeffs, atol=1e-12)
    np.testing.assert_allclose(trace(lo, "Sigma_minus_minus").coeffs, f.coeffs, atol=1e-12)


def test_extension_ratio_bound_is_finite():
    for q in (0, 1, 2):
        for which in ("upper", "lower"):
            assert math.isfinite(extension_ratio_bound(G, q, which))


# -- flattening map --------------------------------------------------------------------
def test_cutoffs_endpoint_values():
    for layer in ("plus", "minus"):
        b1, b2 = cutoff_functions(G, layer)
        z = G.z(layer)
        if layer == "plus":
            assert (b1[0], b1[-1], b2[0], b2[-1]) == (0.0, 1.0, 1.0, 0.0)
        else:
            assert (b1[0], b1[-1], b2[0], b2[-1]) == (0.0, 0.0, 0.0, 1.0)
        for order in (1, 2):
            d1, d2 = cutoff_functions(G, layer, order)
            assert abs(d1[0]) + abs(d1[-1]) + abs(d2[0]) + abs(d2[-1]) < 1e-13
        assert z.size == b1.size


def test_zero_surfaces_give_identity():
    z = SurfaceField.zeros(G)
    f = build_theta(z, SurfaceField.zeros(G, "minus"), G)
    for layer in ("plus", "minus"):
        p = f.phys[layer]
        assert np.max(np.abs(p["theta"])) == 0.0
        np.testing.assert_array_equal(p["J"], 1.0)
        A = f.amat_physical(layer)
        np.testing.assert_array_equal(A, np.broadcast_to(np.eye(3)[:, :, None, None, None], A.shape))
    rep = smallness_check(f)
    assert rep.volume_sum == 0.0 and rep.surface_sum == 0.0 and rep.passed


def test_theta_endpoints():
    eps = 0.05
    f = build_theta(_mode_surface(1, 0, eps), SurfaceField.zeros(G, "minus"), G)
    x1 = G.x_horizontal()[0]
    np.testing.assert_allclose(f.phys["plus"]["theta"][:, :, -1], eps * np.cos(x1)[:, None] + 0 * x1,
                               atol=1e-14)
    np.testing.assert_allclose(f.phys["plus"]["theta"][:, :, 0], 0.0, atol=1e-14)
    np.testing.assert_allclose(f.phys["minus"]["theta"][:, :, 0], 0.0, atol=1e-14)


def test_geometry_invariants():
    f = build_theta(_mode_surface(1, 1, 0.05), _mode_surface(1, 0, 0.04, "minus"), G)
    for layer in ("plus", "minus"):
        p = f.phys[layer]
        np.testing.assert_allclose(p["J"] * p["K"], 1.0, atol=1e-12)
        # J against spectral differentiation of theta
        dth = d_vertical(f.theta).physical()[0 if layer == "plus" else 1]
        np.testing.assert_allclose(p["J"], 1.0 + dth, atol=1e-8)
        # det of the map gradient [[1,0,0],[0,1,0],[A,B,J]] equals J; A Amat^T inverse
        A = f.amat_physical(layer)
        assert np.all(A[2, 0] == 0) and np.all(A[2, 1] == 0) and np.all(A[0, 1] == 0)
    # at the bottom theta vanishes and Amat is the identity
    np.testing.assert_allclose(f.phys["minus"]["theta"][:, :, 0], 0.0, atol=1e-14)
    Ab = f.amat_physical("minus")[..., 0]
    np.testing.assert_allclose(Ab, np.broadcast_to(np.eye(3)[:, :, None, None], Ab.shape), atol=1e-12)


def test_J_against_finite_differences():
    f = build_theta(_mode_surface(1, 0, 0.05), _mode_surface(1, 0, 0.05, "minus"), G)
    th = f.phys["plus"]["theta"][0, 0]
    z = G.z("plus")
    fd = np.gradient(th, z, edge_order=2)
    err = np.max(np.abs(fd[2:-2] - f.phys["plus"]["d3theta"][0, 0, 2:-2]))
    h = np.max(np.diff(z))
    assert err < 50 * h**2


def test_smallness_fails_for_large_data_and_is_monotone():
    verdicts = []
    for amp in (0.01, 0.05, 0.1, 0.2, 0.4, 0.8):
        f = build_theta(_mode_surface(1, 0, amp), SurfaceField.zeros(G, "minus"), G)
        verdicts.append(smallness_check(f).passed)
    assert verdicts[0] and not verdicts[-1]
    assert verdicts == sorted(verdicts, reverse=True)


def test_extend_theta_matches_build_theta():
    ep, em = _mode_surface(1, 1, 0.02), _mode_surface(2, 0, 0.03, "minus")
    a = extend_theta(ep, em, G)
    b = build_theta(ep, em, G).theta
    np.testing.assert_allclose(a.data_plus, b.data_plus, atol=1e-15)
