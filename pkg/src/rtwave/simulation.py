"""Time stepping of the perturbed two-layer system in flattened coordinates.

The unknowns are the special density perturbation ``q``, the velocity ``u``
and the two surface heights.  Writing the system as

    B dx/dt = A x + g(x)

per horizontal mode, ``A`` and ``B`` are the collocated linear operators of
:mod:`rtwave.stability` and ``g`` collects every nonlinear contribution.
The nonlinear forcing is evaluated pseudo-spectrally as the difference
between the full flattened operators and their linearisation, which keeps
the implicit and explicit parts exactly complementary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.integrate as sint
import scipy.linalg as sla

from .equilibrium import EquilibriumProfile, PhysicalParams
from .errors import ConfigError, GeometryBreakdownError, NumericalError, StateValidityError
from .geometry import build_theta, extend_theta, smallness_check, vandermonde_coefficients
from .spectral import (SURFACES, Grid, SurfaceField, VolumeField, cheb_coefficient_matrix,
                       sobolev_norm_surface, sobolev_norm_volume, to_coeffs, to_physical)
from .stability import assemble_full, layer_coefficients

__all__ = [
    "FlattenedState",
    "NonlinearTerms",
    "EnergyReport",
    "Trajectory",
    "Simulator",
    "taylor_remainder",
    "nonlinear_terms",
    "step",
    "energy_functionals",
    "state_norm",
    "state_distance",
    "SCHEMES",
    "TIERS",
]

SCHEMES = ("imex1", "imex2")
TIERS = (0, 1)
_GL_T, _GL_W = np.polynomial.legendre.leggauss(8)
_GL_T, _GL_W = (_GL_T + 1.0) / 2.0, _GL_W / 2.0


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FlattenedState:
    """The perturbation ``(q, u, eta_plus, eta_minus)`` at time ``time``."""

    q: VolumeField
    u: VolumeField
    eta_plus: SurfaceField
    eta_minus: SurfaceField
    time: float = 0.0

    @classmethod
    def zeros(cls, grid, time=0.0):
        return cls(VolumeField.zeros(grid), VolumeField.zeros(grid, "vector3"),
                   SurfaceField.zeros(grid, "plus"), SurfaceField.zeros(grid, "minus"), time)

    @property
    def grid(self):
        return self.q.grid

    def replace(self, **kw):
        return replace(self, **kw)

    def max_eta_amplitude(self):
        return max(float(np.max(np.abs(self.eta_plus.physical()))),
                   float(np.max(np.abs(self.eta_minus.physical()))))

    def is_finite(self):
        arrays = (self.q.data_plus, self.q.data_minus, self.u.data_plus, self.u.data_minus,
                  self.eta_plus.coeffs, self.eta_minus.coeffs)
        return all(bool(np.all(np.isfinite(a))) for a in arrays)


def state_norm(state):
    """``sqrt(|u|_0^2 + |q|_0^2 + |eta|_0^2)``, the tier-0 norm without surface tension."""
    return math.sqrt(sobolev_norm_volume(state.u, 0) ** 2 + sobolev_norm_volume(state.q, 0) ** 2
                     + sobolev_norm_surface(state.eta_plus, 0) ** 2
                     + sobolev_norm_surface(state.eta_minus, 0) ** 2)


def state_distance(a, b):
    """Tier-0 norm of the difference of two states on the same grid."""
    diff = FlattenedState(a.q - b.q, a.u - b.u,
                          a.eta_plus.replace(a.eta_plus.coeffs - b.eta_plus.coeffs),
                          a.eta_minus.replace(a.eta_minus.coeffs - b.eta_minus.coeffs), a.time)
    return state_norm(diff)


# ---------------------------------------------------------------------------
# equilibrium data on the grid
# ---------------------------------------------------------------------------
@dataclass
class _Layer:
    z: np.ndarray
    D: np.ndarray
    w: np.ndarray
    rho: np.ndarray
    drho: np.ndarray
    d2rho: np.ndarray
    h_prime: np.ndarray
    P_prime: np.ndarray
    mu: float
    mu_prime: float
    law: object


@dataclass
class _Context:
    profile: EquilibriumProfile
    params: PhysicalParams
    grid: Grid
    layers: dict
    coeffs: dict
    vander: object
    mask: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    lam2: np.ndarray


def _context(profile, params, grid, vander=None):
    coeffs = {layer: layer_coefficients(profile, params, grid, layer) for layer in SURFACES}
    layers = {}
    for layer in SURFACES:
        c = coeffs[layer]
        _, d1, d2 = profile.derivatives(layer, c.z)
        layers[layer] = _Layer(c.z, c.D, c.w, c.rho, np.asarray(d1, float), np.asarray(d2, float),
                               c.h_prime, c.P_prime, c.mu, c.mu_prime, profile.law(layer))
    xi1, xi2 = grid.xi
    return _Context(profile, params, grid, layers, coeffs,
                    vander or vandermonde_coefficients(m=4), grid.dealias_mask,
                    1j * xi1, 1j * xi2, xi1**2 + xi2**2)


def _coef(values, ctx, surface=False):
    """Physical -> dealiased coefficients."""
    c = to_coeffs(values, surface=surface)
    return c * (ctx.mask if surface else ctx.mask[:, :, None])


def _phys(coeffs, surface=False):
    return to_physical(coeffs, surface=surface)


def _grad_c(c, ctx, layer):
    """Gradient of layer coefficient data, shape ``(3, ...)``."""
    return np.array([c * ctx.m1[:, :, None], c * ctx.m2[:, :, None],
                     c @ ctx.layers[layer].D.T])


# ---------------------------------------------------------------------------
# Taylor remainder
# ---------------------------------------------------------------------------
def _remainder(law, rho_bar, s, method="gauss"):
    """``int_{rho}^{rho+s} (rho + s - z) P''(z) dz`` pointwise (physical arrays)."""
    total = rho_bar + s
    if np.any(total <= 0) or not np.all(np.isfinite(total)):
        raise StateValidityError("total density rho_bar + q + d3(rho_bar) theta is not positive")
    if method == "gauss":
        acc = np.zeros_like(s)
        for t, w in zip(_GL_T, _GL_W):
            acc += w * (1.0 - t) * law.d2P(rho_bar + t * s)
        return s * s * acc
    if method == "adaptive":
        rb = np.broadcast_to(rho_bar, s.shape)
        out = np.empty_like(s)
        for idx in np.ndindex(s.shape):
            a, r0 = float(s[idx]), float(rb[idx])
            if a == 0.0:
                out[idx] = 0.0
                continue
            val, _ = sint.quad(lambda z: (r0 + a - z) * float(law.d2P(z)), r0, r0 + a,
                               epsabs=0.0, epsrel=1e-13, limit=200)
            out[idx] = val
        return out
    raise ValueError(f"unknown remainder method {method!r}")


def taylor_remainder(q, theta, profile, laws=None, method="gauss"):
    """Second-order Taylor remainder of the pressure about the equilibrium.

    Parameters
    ----------
    q, theta : VolumeField
        Density perturbation and vertical displacement of the flattening map.
    laws : mapping, optional
        Layer name to pressure law; defaults to the profile's laws.
    method : {"gauss", "adaptive"}
        8-point Gauss-Legendre rule on the segment, or adaptive quadrature
        per node.

    Returns
    -------
    VolumeField
        ``R = int_{rho}^{rho + s} (rho + s - z) P''(z) dz`` with
        ``s = q + d3(rho_bar) theta``.
    """
    grid = q.grid
    out = []
    for layer in SURFACES:
        law = (laws or {}).get(layer, profile.law(layer)) if laws else profile.law(layer)
        rho, drho, _ = profile.derivatives(layer, grid.z(layer))
        s = to_physical(q.layer(layer)) + np.asarray(drho) * to_physical(theta.layer(layer))
        out.append(_remainder(law, np.asarray(rho, float), s, method))
    return VolumeField.from_physical(out[0], out[1], grid)


# ---------------------------------------------------------------------------
# nonlinear terms
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NonlinearTerms:
    """Forcing of the linear form of the perturbed system.

    ``G1`` and ``G2`` are volume fields (coefficients), ``G3_plus`` and
    ``G3_minus`` hold the coefficients of the three boundary components with
    shape ``(3, N_h, N_h)``; ``G32_plus`` and ``G32_minus`` are their
    curvature parts (to be multiplied by the surface tension); ``G4`` is the
    pair of surface fields.  Iterating yields ``(G1, G2, G3_plus, G3_minus, G4)``.
    """

    G1: VolumeField
    G2: VolumeField
    G3_plus: np.ndarray
    G3_minus: np.ndarray
    G4: tuple
    G32_plus: np.ndarray
    G32_minus: np.ndarray
    dt_theta: VolumeField = field(repr=False, default=None)

    def __iter__(self):
        return iter((self.G1, self.G2, self.G3_plus, self.G3_minus, self.G4))

    def norms(self):
        """L2-type sizes of the five families."""
        g = self.G1.grid
        surf = lambda c: math.sqrt(g.area * float(np.sum(np.abs(c) ** 2)))
        return {"G1": sobolev_norm_volume(self.G1, 0), "G2": sobolev_norm_volume(self.G2, 0),
                "G3_plus": surf(self.G3_plus), "G3_minus": surf(self.G3_minus),
                "G4": math.hypot(sobolev_norm_surface(self.G4[0], 0),
                                 sobolev_norm_surface(self.G4[1], 0))}


def _curvature_parts(eta_c, ctx):
    """``(laplacian, mean-curvature remainder)`` of a surface, physical."""
    m1, m2 = ctx.m1, ctx.m2
    g1, g2 = _phys(m1 * eta_c, True), _phys(m2 * eta_c, True)
    lap = _phys(-ctx.lam2 * eta_c, True)
    fac = 1.0 / np.sqrt(1.0 + g1 * g1 + g2 * g2) - 1.0
    rem = _phys(m1 * _coef(fac * g1, ctx, True) + m2 * _coef(fac * g2, ctx, True), True)
    return lap, rem


def _stress(grad_u, mu, mu_prime, div):
    """Viscous stress ``mu (G + G^T - 2/3 div I) + mu' div I`` from ``G[i, j] = d_i u_j``."""
    S = mu * (grad_u + np.swapaxes(grad_u, 0, 1))
    lam = mu_prime - 2.0 * mu / 3.0
    for i in range(3):
        S[i, i] = S[i, i] + lam * div
    return S


def _nonlinear(state, fields, ctx, remainder="gauss"):
    """Evaluate the forcing families and ``d theta / dt``."""
    grid, prm, prof = ctx.grid, ctx.params, ctx.profile
    # kinematic velocity of both surfaces and its extension
    u_top = _phys(state.u.data_plus[..., -1], True)
    u_int = _phys(state.u.data_plus[..., 0], True)
    eta_c = {"plus": state.eta_plus.coeffs, "minus": state.eta_minus.coeffs}
    g4 = {}
    for surf, uu, nrm in (("plus", u_top, fields.n_plus), ("minus", u_int, fields.n_minus)):
        g4[surf] = uu[0] * nrm[0] + uu[1] * nrm[1]
    w_plus = SurfaceField(_coef(u_top[2] + g4["plus"], ctx, True), grid, "plus")
    w_minus = SurfaceField(_coef(u_int[2] + g4["minus"], ctx, True), grid, "minus")
    dth = extend_theta(w_plus, w_minus, grid, ctx.vander)

    G1, G2, bnd = {}, {}, {}
    for layer in SURFACES:
        L = ctx.layers[layer]
        ph = fields.phys[layer]
        Am = fields.amat_physical(layer)
        K = ph["K"]
        th = ph["theta"]
        dth_p = _phys(dth.layer(layer))
        q_c = state.q.layer(layer)
        u_c = state.u.layer(layer)
        q_p = _phys(q_c)
        u_p = _phys(u_c)
        s = q_p + L.drho * th
        rho = L.rho + s
        R = _remainder(L.law, L.rho, s, remainder)

        # velocity gradients: du[j, k] = d_k u_j
        du_c = np.array([_grad_c(u_c[j], ctx, layer) for j in range(3)])
        du_p = _phys(du_c)
        GA = np.einsum("ik...,jk...->ij...", Am, du_p)          # (grad_A u)[i, j]
        divA = GA[0, 0] + GA[1, 1] + GA[2, 2]
        SA = _stress(GA, L.mu, L.mu_prime, divA)
        G0c = np.swapaxes(du_c, 0, 1)                            # d_i u_j, coefficients
        S0c = _stress(G0c, L.mu, L.mu_prime, G0c[0, 0] + G0c[1, 1] + G0c[2, 2])

        # continuity: K dtheta (d3 q + d3^2 rho theta) - div_A(rho u) + div(rho u)
        d3q = _phys(q_c @ L.D.T)
        flux_c = _coef(rho * u_p, ctx)
        div_full = sum(np.einsum("k...,k...->...", Am[j], _phys(_grad_c(flux_c[j], ctx, layer)))
                       for j in range(3))
        div_lin_c = sum(_grad_c(L.rho * u_c[j], ctx, layer)[j] for j in range(3))
        G1[layer] = _coef(K * dth_p * (d3q + L.d2rho * th) - div_full, ctx) + div_lin_c

        # momentum: rho dt u = N_full, rho_bar dt u = L u + G2
        hq_grad_c = _grad_c(L.h_prime * q_c, ctx, layer)
        hq_grad = _phys(hq_grad_c)
        divS_full = np.zeros_like(u_p)
        SAc = _coef(SA, ctx)
        for i in range(3):
            for j in range(3):
                divS_full[i] += np.einsum("k...,k...->...", Am[j],
                                          _phys(_grad_c(SAc[i, j], ctx, layer)))
        divS_lin_c = np.array([sum(_grad_c(S0c[i, j], ctx, layer)[j] for j in range(3))
                               for i in range(3)])
        Lu_c = -L.rho * hq_grad_c + divS_lin_c
        Lu = _phys(Lu_c)
        gradR = _phys(_grad_c(_coef(R, ctx), ctx, layer))
        grad_th = np.array([ph["A"], ph["B"], ph["d3theta"]])
        gradA = lambda v: np.einsum("ik...,k...->i...", Am, v)
        transport = K * dth_p * du_p[:, 2] - np.einsum("l...,li...->i...", u_p, GA)
        N_full = (rho * transport - L.rho * gradA(hq_grad) + divS_full - gradA(gradR)
                  - prm.g * s * gradA(grad_th))
        G2[layer] = _coef((L.rho * (N_full - Lu) - s * Lu) / rho, ctx)

        bnd[layer] = dict(Pq=L.P_prime * q_p, R=R, SA=SA, S0=_phys(S0c))

    # top surface: full residual (P'q - rho1 g eta + R) N - S_A N + sigma H N
    sp, sm = prm.sigma_plus, prm.sigma_minus
    g = prm.g
    top = {k: (v[..., -1]) for k, v in bnd["plus"].items()}
    eta_p = _phys(eta_c["plus"], True)
    lap_p, rem_p = _curvature_parts(eta_c["plus"], ctx)
    N = fields.n_plus
    e3 = np.array([0.0, 0.0, 1.0])[:, None, None]
    full = ((top["Pq"] - prof.rho1 * g * eta_p + top["R"]) * N
            - np.einsum("ij...,j...->i...", top["SA"], N) + sp * (lap_p + rem_p) * N)
    lin = (top["Pq"] - prof.rho1 * g * eta_p + sp * lap_p) * e3 - top["S0"][:, 2]
    G3p = _coef(lin - full, ctx, True)
    G32p = _coef(lap_p * e3 - (lap_p + rem_p) * N, ctx, True)

    # interface: [[P'q + R]] N - [[rho]] g eta N - [[S_A]] N - sigma H N
    up = {k: v[..., 0] for k, v in bnd["plus"].items()}
    dn = {k: v[..., -1] for k, v in bnd["minus"].items()}
    jm = lambda key: up[key] - dn[key]
    eta_m = _phys(eta_c["minus"], True)
    lap_m, rem_m = _curvature_parts(eta_c["minus"], ctx)
    N = fields.n_minus
    full = ((jm("Pq") + jm("R") - prof.jump * g * eta_m) * N
            - np.einsum("ij...,j...->i...", jm("SA"), N) - sm * (lap_m + rem_m) * N)
    lin = (jm("Pq") - prof.jump * g * eta_m - sm * lap_m) * e3 - jm("S0")[:, 2]
    G3m = _coef(full - lin, ctx, True)
    G32m = _coef(lap_m * e3 - (lap_m + rem_m) * N, ctx, True)

    return NonlinearTerms(
        VolumeField(G1["plus"], G1["minus"], grid),
        VolumeField(G2["plus"], G2["minus"], grid, "vector3"),
        G3p, G3m,
        (SurfaceField(_coef(g4["plus"], ctx, True), grid, "plus"),
         SurfaceField(_coef(g4["minus"], ctx, True), grid, "minus")),
        G32p, G32m, dth)


def nonlinear_terms(state, fields, profile, params, remainder="gauss"):
    """Nonlinear forcing ``(G1, G2, G3_plus, G3_minus, G4)`` of the linear form.

    Parameters
    ----------
    state : FlattenedState
    fields : GeometryFields or None
        Geometry built from the state's surfaces; rebuilt when ``None``.
    remainder : {"gauss", "adaptive"}
        Quadrature used for the pressure Taylor remainder.

    Returns
    -------
    NonlinearTerms
    """
    fields = fields or build_theta(state.eta_plus, state.eta_minus, state.grid)
    return _nonlinear(state, fields, _context(profile, params, state.grid, fields.vander),
                      remainder)


# ---------------------------------------------------------------------------
# energy functionals
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EnergyReport:
    """Energy, dissipation, masses and energy-law residual of one state.

    ``physical_energy`` is reported relative to the equilibrium with the
    mass multipliers subtracted (see :class:`Simulator`); ``complete`` is
    false when the history was too short for the time-difference terms.
    """

    E_n_sigma: float
    D_n_sigma: float
    F_surrogate: float
    physical_energy: float
    mass_plus: float
    mass_minus: float
    energy_law_residual: float
    dissipation: float = float("nan")
    tier: int = 0
    complete: bool = True
    header: str = ("tier-n surrogate: same Heaviside/surface-tension structure as the full "
                   "functionals, restricted to derivative counts n in {0, 1}")


def _heaviside(x):
    return 1.0 if x > 0 else 0.0


def _tier_terms(state, prev, prev2, profile, params, n):
    """Tier-``n`` energy, dissipation and F surrogates."""
    jump, sig_c = profile.jump, max(profile.sigma_c, 0.0)
    sp, sm = params.sigma_plus, params.sigma_minus
    eta = (state.eta_plus, state.eta_minus)
    eta_sq = lambda s: sum(sobolev_norm_surface(e, s) ** 2 for e in eta)
    vol = lambda f, k: sobolev_norm_volume(f, k) ** 2 if k >= 0 else 0.0

    def diff(get, order):
        """Backward difference quotient of ``get(state)`` of the given order."""
        if order == 0:
            return get(state)
        if order == 1 and prev is not None:
            dt = state.time - prev.time
            return _scaled_diff(get(state), get(prev), 1.0 / dt)
        if order == 2 and prev is not None and prev2 is not None:
            dt = state.time - prev.time
            a, b, c = get(state), get(prev), get(prev2)
            return _scaled_diff(_scaled_diff(a, b, 1.0), _scaled_diff(b, c, 1.0), 1.0 / dt**2)
        return None

    complete = True

    def vt(get, j, k):
        nonlocal complete
        f = diff(get, j)
        if f is None:
            complete = False
            return 0.0
        return vol(f, k)

    def st(j, s):
        nonlocal complete
        tot = 0.0
        for which in ("eta_plus", "eta_minus"):
            f = diff(lambda st_: getattr(st_, which), j)
            if f is None:
                complete = False
                return 0.0
            tot += sobolev_norm_surface(f, max(s, -2.0)) ** 2
        return tot

    def st_weighted(j, s):
        nonlocal complete
        tot = 0.0
        for which, sig in (("eta_plus", sp), ("eta_minus", sm)):
            f = diff(lambda st_: getattr(st_, which), j)
            if f is None:
                complete = False
                return 0.0
            tot += sig**2 * sobolev_norm_surface(f, s) ** 2
        return tot

    get_u, get_q = (lambda s_: s_.u), (lambda s_: s_.q)
    E = sum(vt(get_u, j, 2 * n - 2 * j) for j in range(n + 1)) + vol(state.q, 2 * n)
    E += sum(vt(get_q, j, 2 * n - 2 * j + 1) for j in range(1, n + 1))
    E += sum(st(j, 2 * n - 2 * j + 1.5) for j in range(1, n + 1))
    sig_min = min(sp, sm)
    if jump > 0:
        E += min(1.0, sp, sm - sig_c) * eta_sq(2 * n + 1)
    elif jump < 0:
        E += eta_sq(2 * n) + min(1.0, sig_min) * eta_sq(2 * n + 1)

    D = sum(vt(get_u, j, 2 * n - 2 * j + 1) for j in range(n + 1)) + vol(state.q, 2 * n)
    D += vt(get_q, 1, 2 * n - 1)
    D += sum(vt(get_q, j, 2 * n - 2 * j + 2) for j in range(2, n + 2))
    if jump > 0:
        D += min(1.0, sp, sm - sig_c, sp**2, (sm - sig_c) ** 2) * eta_sq(2 * n + 1.5)
    elif jump < 0:
        D += eta_sq(2 * n - 0.5) + min(1.0, sig_min**2) * eta_sq(2 * n + 1.5)
    D += st(1, 2 * n - 0.5) + st_weighted(1, 2 * n + 0.5)
    D += sum(st(j, 2 * n - 2 * j + 2.5) for j in range(2, n + 2))
    F = eta_sq(2 * n + 0.5)
    return E, D, F, complete


def _scaled_diff(a, b, scale):
    if isinstance(a, SurfaceField):
        return a.replace((a.coeffs - b.coeffs) * scale)
    return (a - b) * scale


def _potential_density(law, ref):
    """``Phi(z) = int_ref^z P(s)/s^2 ds`` as a vectorised callable."""
    def phi(z, base=None, base_val=None):
        z = np.asarray(z, float)
        if base is None:
            return np.array([sint.quad(lambda s: float(law.P(s)) / s**2, ref, float(v),
                                       epsabs=0.0, epsrel=1e-13, limit=200)[0]
                             for v in np.ravel(z)]).reshape(z.shape)
        acc = np.zeros_like(z)
        for t, w in zip(_GL_T, _GL_W):
            x = base + t * (z - base)
            acc += w * law.P(x) / x**2
        return base_val + (z - base) * acc
    return phi


class _EnergyEvaluator:
    """Physical energy relative to equilibrium and the dissipation integral."""

    def __init__(self, ctx):
        self.ctx = ctx
        self.phi, self.phi_bar, self.lam = {}, {}, {}
        g = ctx.params.g
        for layer in SURFACES:
            L = ctx.layers[layer]
            ref = float(L.rho[-1])
            phi = _potential_density(L.law, ref)
            self.phi[layer] = phi
            self.phi_bar[layer] = phi(L.rho)
            # multiplier of the mass constraint: R'(rho_bar) + g x3 is constant
            self.lam[layer] = float(self.phi_bar[layer][-1] + L.law.P(L.rho[-1]) / L.rho[-1]
                                    + g * L.z[-1])

    def _integrate(self, values, layer):
        return self.ctx.grid.area * float(np.mean(values, axis=(-3, -2)) @ self.ctx.layers[layer].w)

    def masses(self, state, fields):
        """``(mass_plus, mass_minus)`` and their deviations from equilibrium."""
        out, dev = [], []
        for layer in SURFACES:
            L = self.ctx.layers[layer]
            ph = fields.phys[layer]
            s = _phys(state.q.layer(layer)) + L.drho * ph["theta"]
            base = self.ctx.grid.area * float(L.rho @ L.w)
            d = self._integrate(s * ph["J"] + L.rho * ph["d3theta"], layer)
            out.append(base + d)
            dev.append(d)
        return tuple(out), tuple(dev)

    def energy(self, state, fields):
        ctx, g = self.ctx, self.ctx.params.g
        total = 0.0
        for layer in SURFACES:
            L = ctx.layers[layer]
            ph = fields.phys[layer]
            J, th = ph["J"], ph["theta"]
            s = _phys(state.q.layer(layer)) + L.drho * th
            rho = L.rho + s
            if np.any(rho <= 0):
                raise StateValidityError("total density is not positive")
            u = _phys(state.u.layer(layer))
            m = rho * J
            phi = self.phi[layer](rho, L.rho, self.phi_bar[layer])
            lam = self.lam[layer]
            dens = (0.5 * m * np.sum(u * u, axis=0) + J * rho * phi + g * m * (L.z + th) - lam * m
                    - (L.rho * self.phi_bar[layer] + g * L.rho * L.z - lam * L.rho))
            total += self._integrate(dens, layer)
        prm = ctx.params
        area = ctx.grid.area
        for eta, sig, pa in ((state.eta_plus, prm.sigma_plus, prm.p_atm),
                             (state.eta_minus, prm.sigma_minus, 0.0)):
            c = eta.coeffs
            g1, g2 = _phys(ctx.m1 * c, True), _phys(ctx.m2 * c, True)
            grad2 = g1 * g1 + g2 * g2
            surf = pa * _phys(c, True) + sig * grad2 / (np.sqrt(1.0 + grad2) + 1.0)
            total += area * float(np.mean(surf))
        return total

    def dissipation(self, state, fields):
        ctx = self.ctx
        total = 0.0
        for layer in SURFACES:
            L = ctx.layers[layer]
            Am = fields.amat_physical(layer)
            du = _phys(np.array([_grad_c(state.u.layer(layer)[j], ctx, layer) for j in range(3)]))
            GA = np.einsum("ik...,jk...->ij...", Am, du)
            div = GA[0, 0] + GA[1, 1] + GA[2, 2]
            D0 = GA + np.swapaxes(GA, 0, 1)
            for i in range(3):
                D0[i, i] = D0[i, i] - 2.0 / 3.0 * div
            dens = fields.phys[layer]["J"] * (0.5 * L.mu * np.sum(D0 * D0, axis=(0, 1))
                                              + L.mu_prime * div * div)
            total += self._integrate(dens, layer)
        return total


def energy_functionals(state, fields, profile, params, n=0, history=(), dt=None):
    """Tier-``n`` surrogates, physical energy, masses and energy-law residual.

    Parameters
    ----------
    state : FlattenedState
    fields : GeometryFields or None
    n : {0, 1}
        Surrogate tier.
    history : sequence of FlattenedState
        Earlier states, most recent last.  Time-difference quotients use the
        last two; the energy-law residual
        ``(E(t) - E(t - 2 dt)) / (2 dt) + D(t - dt)`` needs both as well.
    dt : float, optional
        Step between history entries; inferred from the time stamps.

    Returns
    -------
    EnergyReport
    """
    if n not in TIERS:
        raise ConfigError("tier", f"tier must be one of {TIERS}, got {n!r}")
    grid = state.grid
    fields = fields or build_theta(state.eta_plus, state.eta_minus, grid)
    ctx = _context(profile, params, grid, fields.vander)
    ev = _EnergyEvaluator(ctx)
    prev = history[-1] if len(history) >= 1 else None
    prev2 = history[-2] if len(history) >= 2 else None
    E, D, F, complete = _tier_terms(state, prev, prev2, profile, params, n)
    phys_e = ev.energy(state, fields)
    diss = ev.dissipation(state, fields)
    (mp, mm), _ = ev.masses(state, fields)
    resid = float("nan")
    if prev is not None and prev2 is not None:
        f1 = build_theta(prev.eta_plus, prev.eta_minus, grid, fields.vander)
        f2 = build_theta(prev2.eta_plus, prev2.eta_minus, grid, fields.vander)
        step_ = dt or (state.time - prev2.time) / 2.0
        resid = (phys_e - ev.energy(prev2, f2)) / (2.0 * step_) + ev.dissipation(prev, f1)
    return EnergyReport(E, D, F, phys_e, mp, mm, resid, diss, n, complete)


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------
@dataclass
class Trajectory:
    """Time series recorded by :meth:`Simulator.run`."""

    t: list = field(default_factory=list)
    E: list = field(default_factory=list)
    D: list = field(default_factory=list)
    F: list = field(default_factory=list)
    physical_energy: list = field(default_factory=list)
    dissipation: list = field(default_factory=list)
    mass_plus: list = field(default_factory=list)
    mass_minus: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    max_eta_amplitude: list = field(default_factory=list)
    mass_correction: list = field(default_factory=list)
    final_state: Optional[FlattenedState] = None
    breakdown: Optional[str] = None

    COLUMNS = ("t", "E", "D", "F_surrogate", "physical_energy", "mass_plus", "mass_minus",
               "residual", "max_eta_amplitude")

    def rows(self):
        cols = (self.t, self.E, self.D, self.F, self.physical_energy, self.mass_plus,
                self.mass_minus, self.residual, self.max_eta_amplitude)
        return [tuple(float(c[i]) for c in cols) for i in range(len(self.t))]

    def relative_mass_drift(self):
        """Largest ``|M(t) - M(0)| / M(0)`` per layer."""
        out = []
        for series in (self.mass_plus, self.mass_minus):
            a = np.asarray(series)
            out.append(float(np.max(np.abs(a - a[0])) / abs(a[0])))
        return tuple(out)


class Simulator:
    """IMEX integrator for the perturbed flattened system.

    Parameters
    ----------
    profile, params, grid
        Equilibrium, physical parameters and discretisation.
    dt : float
        Time step.
    scheme : {"imex1", "imex2"}
        ``imex1``: backward Euler on the linear part, forward Euler on the
        forcing.  ``imex2``: trapezoidal rule on the linear part and an
        explicit midpoint evaluation of the forcing (predicted by a
        half-step of ``imex1``).
    mass_fix : bool
        After every step shift the horizontal mean of ``q`` in each layer so
        the layer masses keep their initial values.  The size of the
        correction is recorded.
    remainder : {"gauss", "adaptive"}
        Quadrature for the pressure Taylor remainder.
    cfl : float
        ``dt`` must not exceed ``cfl * h_min**2 / max(mu)`` where ``h_min``
        is the smallest vertical node spacing.
    """

    def __init__(self, profile, params, grid, dt, scheme="imex1", mass_fix=False,
                 remainder="gauss", cfl=1e4, vander=None):
        if scheme not in SCHEMES:
            raise ConfigError("scheme", f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        if not dt > 0:
            raise ConfigError("dt", "time step must be positive")
        h_min = min(float(np.min(np.diff(grid.z(layer)))) for layer in SURFACES)
        mu_max = max(params.mu_plus, params.mu_minus)
        if dt > cfl * h_min**2 / mu_max:
            raise ConfigError("dt", f"dt = {dt} exceeds the configured bound "
                                    f"{cfl} * h_min^2 / mu = {cfl * h_min**2 / mu_max:.3g}")
        self.profile, self.params, self.grid = profile, params, grid
        self.dt, self.scheme, self.mass_fix, self.remainder = float(dt), scheme, mass_fix, remainder
        self.ctx = _context(profile, params, grid, vander)
        self.energy = _EnergyEvaluator(self.ctx)
        self._modes()
        self._assemble()
        self._fields_cache = {}

    # -- mode bookkeeping -----------------------------------------------------
    def _modes(self):
        g = self.grid
        n = g.mode_index
        keep = g.dealias_mask
        half = []
        for a in range(g.N_h):
            for b in range(g.N_h):
                if keep[a, b] and (n[a] > 0 or (n[a] == 0 and n[b] >= 0)):
                    half.append((a, b))
        self.idx = tuple(np.array(v) for v in zip(*half))
        self.cidx = tuple((-i) % g.N_h for i in self.idx)
        self.n_modes = len(half)
        n_p, n_m = g.N_v_plus, g.N_v_minus
        self.sizes = [n_p, n_m] + [n_p] * 3 + [n_m] * 3 + [1, 1]
        self.nx = sum(self.sizes)

    def _assemble(self):
        g = self.grid
        A = np.zeros((self.n_modes, self.nx, self.nx), complex)
        B = np.zeros((self.n_modes, self.nx, self.nx))
        xi1, xi2 = g.xi
        for m, (a, b) in enumerate(zip(*self.idx)):
            A[m], B[m], off, rows = assemble_full((xi1[a, b], xi2[a, b]), self.ctx.coeffs,
                                                  self.params, self.profile)
        self.A, self.B, self.offsets, self.row_map = A, B, off, rows
        self.alg = np.flatnonzero(~np.any(B[0] != 0, axis=1))
        c = self.dt if self.scheme == "imex1" else self.dt / 2.0
        try:
            self.Minv = np.linalg.inv(B - c * A)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"implicit operator is singular: {exc}") from exc
        self.Vinv = {layer: cheb_coefficient_matrix(g.nz(layer)) for layer in SURFACES}

    # -- packing --------------------------------------------------------------
    def pack(self, state):
        i = self.idx
        parts = [state.q.data_plus[i], state.q.data_minus[i]]
        parts += [state.u.data_plus[k][i] for k in range(3)]
        parts += [state.u.data_minus[k][i] for k in range(3)]
        parts += [state.eta_plus.coeffs[i][:, None], state.eta_minus.coeffs[i][:, None]]
        return np.concatenate(parts, axis=1)

    def _split(self, X):
        return np.split(X, np.cumsum(self.sizes)[:-1], axis=1)

    def _fill(self, shape, values):
        out = np.zeros(shape, complex)
        out[(Ellipsis,) + self.idx] = values
        zero = (self.idx[0] == 0) & (self.idx[1] == 0)
        # conjugate partners of the half-plane modes (the zero mode is its own)
        ci = tuple(c[~zero] for c in self.cidx)
        out[(Ellipsis,) + ci] = np.conj(values[..., ~zero])
        if np.any(zero):
            out[(Ellipsis, 0, 0)] = out[(Ellipsis, 0, 0)].real
        return out

    def unpack(self, X, time):
        g = self.grid
        p = self._split(X)
        q = VolumeField(_fill_layer(self, p[0], g.N_v_plus), _fill_layer(self, p[1], g.N_v_minus), g)
        up = np.array([_fill_layer(self, p[2 + k], g.N_v_plus) for k in range(3)])
        um = np.array([_fill_layer(self, p[5 + k], g.N_v_minus) for k in range(3)])
        ep = _fill_surface(self, p[8][:, 0])
        em = _fill_surface(self, p[9][:, 0])
        return FlattenedState(q, VolumeField(up, um, g, "vector3"),
                              SurfaceField(ep, g, "plus"), SurfaceField(em, g, "minus"), time)

    # -- geometry and forcing -------------------------------------------------
    def geometry(self, state):
        """Geometry fields of ``state``; raises when the map is not small."""
        key = id(state)
        hit = self._fields_cache.get(key)
        if hit is not None and hit[0] is state:
            return hit[1]
        fields = build_theta(state.eta_plus, state.eta_minus, self.grid, self.ctx.vander)
        report = smallness_check(fields)
        if not report.passed:
            raise GeometryBreakdownError(
                f"flattening map left the small-deformation regime at t = {state.time:.6g} "
                f"(volume deviation {report.volume_sum:.3g}, surface deviation "
                f"{report.surface_sum:.3g}); use smaller initial data")
        self._fields_cache = {key: (state, fields)}
        return fields

    def forcing_terms(self, state, fields=None):
        fields = fields or self.geometry(state)
        return _nonlinear(state, fields, self.ctx, self.remainder)

    def forcing(self, state, fields=None):
        """Packed right-hand side ``g`` of ``B x' = A x + g`` for the half-plane modes."""
        nl = self.forcing_terms(state, fields)
        g = self.grid
        i = self.idx
        parts = []
        for layer in SURFACES:
            c = nl.G1.layer(layer)[i] @ self.Vinv[layer].T
            c[:, -1] = 0.0
            parts.append(c)
        for layer, n in (("plus", g.N_v_plus), ("minus", g.N_v_minus)):
            for k in range(3):
                v = nl.G2.layer(layer)[k][i].copy()
                if layer == "plus":
                    v[:, -1] = -nl.G3_plus[k][i]
                    v[:, 0] = 0.0
                else:
                    v[:, -1] = nl.G3_minus[k][i]
                    v[:, 0] = 0.0
                parts.append(v)
        parts += [nl.G4[0].coeffs[i][:, None], nl.G4[1].coeffs[i][:, None]]
        return np.concatenate(parts, axis=1)

    # -- stepping -------------------------------------------------------------
    def _apply(self, M, X):
        return np.einsum("mij,mj->mi", M, X)

    def step(self, state, fields=None):
        """Advance ``state`` by one time step."""
        if not state.is_finite():
            raise NumericalError("state contains non-finite values")
        dt = self.dt
        x0 = self.pack(state)
        g0 = self.forcing(state, fields)
        if self.scheme == "imex1":
            x1 = self._apply(self.Minv, self._apply(self.B, x0) + dt * g0)
        else:
            xs = self._apply(self.Minv, self._apply(self.B, x0) + 0.5 * dt * g0)
            star = self.unpack(xs, state.time + 0.5 * dt)
            gm = self.forcing(star)
            rhs = self._apply(self.B, x0) + 0.5 * dt * self._apply(self.A, x0) + dt * gm
            rhs[:, self.alg] = 0.5 * dt * (2.0 * gm[:, self.alg] - g0[:, self.alg])
            x1 = self._apply(self.Minv, rhs)
        if not np.all(np.isfinite(x1)):
            raise NumericalError("implicit solve produced non-finite values")
        new = self.unpack(x1, state.time + dt)
        if self.mass_fix:
            new = self.fix_mass(new)[0]
        self.geometry(new)
        return new

    # -- mass -----------------------------------------------------------------
    def masses(self, state, fields=None):
        return self.energy.masses(state, fields or self.geometry(state))

    def fix_mass(self, state, target=(0.0, 0.0)):
        """Shift the mean of ``q`` per layer so the mass deviations equal ``target``.

        Returns the corrected state and the applied shifts.
        """
        fields = self.geometry(state)
        _, dev = self.energy.masses(state, fields)
        data, shifts = {}, []
        for layer, d, tgt in zip(SURFACES, dev, target):
            vol_J = self.energy._integrate(fields.phys[layer]["J"], layer)
            c = (tgt - d) / vol_J
            arr = state.q.layer(layer).copy()
            arr[0, 0, :] += c
            data[layer] = arr
            shifts.append(c)
        return state.replace(q=VolumeField(data["plus"], data["minus"], self.grid)), tuple(shifts)

    # -- initial data ---------------------------------------------------------
    def project_q(self, state):
        """Remove the top Chebyshev coefficient of ``q`` in each layer."""
        out = {}
        for layer in SURFACES:
            n = self.grid.nz(layer)
            Vinv = self.Vinv[layer]
            V = np.polynomial.chebyshev.chebvander(np.cos(np.pi * np.arange(n)[::-1] / (n - 1)),
                                                   n - 1)
            c = state.q.layer(layer) @ Vinv.T
            c[..., -1] = 0.0
            out[layer] = c @ V.T
        return state.replace(q=VolumeField(out["plus"], out["minus"], self.grid))

    def _correction_columns(self):
        """Packed-space columns of the smooth end-value corrections of ``u``."""
        g = self.grid
        starts = np.concatenate([[0], np.cumsum(self.sizes)])
        cols = []
        for layer, first in (("plus", 2), ("minus", 5)):
            lo, hi = g.interval(layer)
            t = (g.z(layer) - lo) / (hi - lo)
            # cubic Hermite shapes: unit value or unit slope at one end
            shapes = (2 * t**3 - 3 * t**2 + 1, 3 * t**2 - 2 * t**3, t**3 - 2 * t**2 + t, t**3 - t**2)
            for k in range(3):
                for shape in shapes:
                    col = np.zeros(self.nx)
                    col[starts[first + k]:starts[first + k + 1]] = shape
                    cols.append(col)
        return np.array(cols).T

    def make_consistent(self, state, iterations=5, mass_target=(0.0, 0.0)):
        """Adjust ``u`` near the layer ends so every algebraic row holds.

        The top Chebyshev coefficient of ``q`` is projected out, the layer
        masses are matched to ``mass_target`` (deviation from equilibrium)
        and smooth cubic corrections of ``u`` in each layer enforce the
        traction, continuity and no-slip rows, iterating on the nonlinear
        boundary forcing.
        """
        state = self.project_q(state)
        C = self._correction_columns()
        rows = np.array([r for r in self.alg if not self._is_q_row(r)])
        # minimum-norm corrections; values and slopes at each end are free,
        # so the rows always have full rank
        P = np.linalg.pinv(self.A[:, rows, :] @ C)
        for _ in range(iterations):
            state = self.fix_mass(state, mass_target)[0]
            x = self.pack(state)
            res = self._apply(self.A, x)[:, rows] + self.forcing(state)[:, rows]
            delta = -self._apply(P, res)
            state = self.unpack(x + delta @ C.T, state.time)
        return self.fix_mass(state, mass_target)[0]

    def _is_q_row(self, r):
        return r < self.sizes[0] + self.sizes[1]

    def initial_state(self, eta_modes=(), u_modes=(), random_u=0.0, seed=0, consistent=True):
        """Initial data from surface modes and smooth velocity seeds.

        Parameters
        ----------
        eta_modes : sequence of dict
            ``{"n": (n1, n2), "plus": a, "minus": b}``: adds
            ``a cos(n1 x1/L1 + n2 x2/L2)`` to ``eta_plus`` (``b`` to ``eta_minus``).
        u_modes : sequence of dict
            ``{"n": (n1, n2), "amp": (a1, a2, a3)}``: adds
            ``a_k cos(xi . x') s(x3)`` with a smooth vertical shape vanishing
            at the bottom.
        random_u : float
            Amplitude of additional seeded random low-mode velocity.
        """
        g = self.grid
        x1, x2 = g.x_horizontal()
        X1, X2 = x1[:, None], x2[None, :]
        ep = np.zeros((g.N_h, g.N_h))
        em = np.zeros((g.N_h, g.N_h))
        for mode in eta_modes:
            n1, n2 = mode["n"]
            wave = np.cos(n1 * X1 / g.L1 + n2 * X2 / g.L2 + mode.get("phase", 0.0))
            ep = ep + mode.get("plus", 0.0) * wave
            em = em + mode.get("minus", 0.0) * wave
        shape = {layer: np.sin(0.5 * np.pi * (g.z(layer) + g.b) / (g.ell + g.b))
                 for layer in SURFACES}
        u = {layer: np.zeros((3, g.N_h, g.N_h, g.nz(layer))) for layer in SURFACES}
        modes = list(u_modes)
        if random_u:
            rng = np.random.default_rng(seed)
            for n1 in range(-2, 3):
                for n2 in range(0, 3):
                    if (n1, n2) == (0, 0):
                        continue
                    modes.append({"n": (n1, n2), "amp": random_u * rng.standard_normal(3),
                                  "phase": float(rng.uniform(0, 2 * np.pi))})
        for mode in modes:
            n1, n2 = mode["n"]
            wave = np.cos(n1 * X1 / g.L1 + n2 * X2 / g.L2 + mode.get("phase", 0.0))
            for layer in SURFACES:
                for k in range(3):
                    u[layer][k] += mode["amp"][k] * wave[:, :, None] * shape[layer]
        mask3 = self.ctx.mask[:, :, None]
        state = FlattenedState(
            VolumeField.zeros(g),
            VolumeField(to_coeffs(u["plus"]) * mask3, to_coeffs(u["minus"]) * mask3, g, "vector3"),
            SurfaceField(to_coeffs(ep, surface=True) * self.ctx.mask, g, "plus"),
            SurfaceField(to_coeffs(em, surface=True) * self.ctx.mask, g, "minus"))
        return self.make_consistent(state) if consistent else state

    def eigenmode_state(self, mode, amplitude, rank=0):
        """Initial data along a linear eigenvector of horizontal mode ``mode``.

        Returns ``(state, eigenvalue)``; the eigenvector is scaled so that
        the larger surface amplitude equals ``amplitude``.  ``rank`` selects
        the eigenvalue by decreasing real part.
        """
        g = self.grid
        n1, n2 = mode
        a, b = n1 % g.N_h, n2 % g.N_h
        if (n1, n2) != (0, 0) and not (n1 > 0 or (n1 == 0 and n2 > 0)):
            n1, n2 = -n1, -n2
            a, b = n1 % g.N_h, n2 % g.N_h
        hits = np.flatnonzero((self.idx[0] == a) & (self.idx[1] == b))
        if hits.size == 0:
            raise ConfigError("mode", f"mode {mode} lies outside the dealiased band")
        m = int(hits[0])
        lam, vecs = sla.eig(self.A[m], self.B[m])
        ok = np.isfinite(lam) & (np.abs(lam) < 1e8)
        order = np.flatnonzero(ok)[np.argsort(-lam[ok].real, kind="stable")]
        j = order[rank]
        v = vecs[:, j]
        eta = v[-2:]
        scale = amplitude / (2.0 * np.max(np.abs(eta))) if (n1, n2) != (0, 0) else \
            amplitude / np.max(np.abs(eta))
        v = v * scale / np.exp(1j * np.angle(eta[np.argmax(np.abs(eta))]))
        X = np.zeros((self.n_modes, self.nx), complex)
        X[m] = v.real if (n1, n2) == (0, 0) else v
        return self.unpack(X, 0.0), complex(lam[j])

    # -- driver ---------------------------------------------------------------
    def run(self, state, n_steps, tier=0, record_every=1, callback=None, halt_on_breakdown=True):
        """Integrate ``n_steps`` steps, recording energies at every step.

        ``callback(step_index, state)`` is invoked after each step.  On a
        geometry breakdown the trajectory is returned with ``breakdown`` set
        unless ``halt_on_breakdown`` is false, in which case the error is
        raised.
        """
        if tier not in TIERS:
            raise ConfigError("tier", f"tier must be one of {TIERS}, got {tier!r}")
        traj = Trajectory()
        hist = [None, None]
        energies, diss = [], []
        cur = state
        for k in range(n_steps + 1):
            if k > 0:
                try:
                    cur = self.step(cur)
                except GeometryBreakdownError as exc:
                    if not halt_on_breakdown:
                        raise
                    traj.breakdown = str(exc)
                    break
                if callback is not None:
                    callback(k, cur)
            fields = self.geometry(cur)
            energies.append(self.energy.energy(cur, fields))
            diss.append(self.energy.dissipation(cur, fields))
            if k % record_every == 0 or k == n_steps:
                E, D, F, _ = _tier_terms(cur, hist[-1], hist[-2], self.profile, self.params, tier)
                (mp, mm), _ = self.energy.masses(cur, fields)
                res = (energies[-1] - energies[-3]) / (2 * self.dt) + diss[-2] if k >= 2 \
                    else float("nan")
                traj.t.append(cur.time)
                traj.E.append(E)
                traj.D.append(D)
                traj.F.append(F)
                traj.physical_energy.append(energies[-1])
                traj.dissipation.append(diss[-1])
                traj.mass_plus.append(mp)
                traj.mass_minus.append(mm)
                traj.residual.append(res)
                traj.max_eta_amplitude.append(cur.max_eta_amplitude())
            hist = [hist[-1], cur]
        traj.final_state = cur
        return traj


def _fill_layer(sim, arr, n):
    """Scatter half-plane mode values ``(n_modes, n)`` onto the full FFT grid."""
    g = sim.grid
    vals = np.moveaxis(arr, 0, -1)                       # (n, n_modes)
    full = sim._fill((n, g.N_h, g.N_h), vals)
    return np.moveaxis(full, 0, -1)


def _fill_surface(sim, arr):
    g = sim.grid
    return sim._fill((g.N_h, g.N_h), arr)


_SIM_CACHE: dict = {}


def step(state, dt, fields, profile, params, scheme="imex1", **options):
    """Advance ``state`` by one step of the chosen IMEX scheme.

    The per-mode implicit operators are cached for repeated calls with the
    same ``(profile, params, grid, dt, scheme)``.
    """
    key = (id(profile), id(params), state.grid, float(dt), scheme, tuple(sorted(options.items())))
    sim = _SIM_CACHE.get(key)
    if sim is None or sim.profile is not profile or sim.params is not params:
        _SIM_CACHE.clear()
        sim = Simulator(profile, params, state.grid, dt, scheme, **options)
        _SIM_CACHE[key] = sim
    return sim.step(state, fields)
