"""Per-mode linear stability of the flattened two-layer system.

For each horizontal wavevector ``xi`` the linearised equations become an
ODE system in ``x3`` which is collocated on the Chebyshev nodes of both
layers.  Time dependence ``exp(lambda t)`` gives the pencil
``lambda B x = A x``.  Boundary, jump and Dirichlet conditions replace the
momentum rows at the layer end nodes, so ``B`` vanishes on those rows.

Unknown (and row) ordering of the complex form::

    q+ | q- | u1+ u2+ u3+ | u1- u2- u3- | eta+ | eta-

The real form rotates ``xi`` onto the first axis, drops the decoupled
cross-stream velocity and writes the along-stream velocity as ``i w``; all
entries are then real.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import BracketError, NumericalError
from .spectral import SURFACES, cheb_coefficient_matrix

__all__ = [
    "ModeOperator",
    "GrowthRateResult",
    "PositivityReport",
    "assemble_mode_operator",
    "growth_rate",
    "pencil_eigenvalues",
    "find_neutral_sigma",
    "sharp_poincare_constant",
    "poincare_ratio",
    "energy_form_positivity",
    "lattice_modes",
    "stability_verdict",
]

STABLE_TOL = 1e-8
SPURIOUS_CUTOFF = 1e8


@dataclass(frozen=True)
class LayerCoefficients:
    """Equilibrium coefficients of one layer at its collocation nodes."""

    z: np.ndarray
    D: np.ndarray
    w: np.ndarray
    rho: np.ndarray
    drho: np.ndarray
    h_prime: np.ndarray
    mu: float
    mu_prime: float

    @property
    def P_prime(self):
        return self.rho * self.h_prime


def layer_coefficients(profile, params, grid, layer):
    z = grid.z(layer)
    rho, drho, _ = profile.derivatives(layer, z)
    rho = np.asarray(rho, float)
    if layer == "plus":
        rho[-1], rho[0] = profile.rho1, profile.rho_top_of_interface
    else:
        rho[-1] = profile.rho_bot_of_interface
    return LayerCoefficients(z, grid.D(layer), grid.weights(layer), rho, np.asarray(drho, float),
                             np.asarray(profile.h_prime(layer, rho), float),
                             params.mu(layer), params.mu_prime(layer))


@dataclass
class ModeOperator:
    """Collocated pencil ``lambda B x = A x`` for one wavevector.

    Attributes
    ----------
    offsets : dict
        Name of each unknown block mapped to its ``slice``.
    row_map : list of (slice, str)
        Which rows carry interior equations and which carry boundary, jump,
        Dirichlet, kinematic or mass-constraint equations.
    """

    xi: tuple
    A_mat: np.ndarray
    B_mat: np.ndarray
    offsets: dict
    row_map: list
    form: str
    mass_constraints: bool = False
    context: Optional[tuple] = field(default=None, repr=False)

    @property
    def size(self):
        return self.A_mat.shape[0]

    def algebraic_rows(self):
        return np.flatnonzero(~np.any(self.B_mat != 0, axis=1))

    def refine(self, extra=8):
        """Reassemble at ``N_v + extra`` nodes per layer."""
        if self.context is None:
            raise ValueError("operator carries no assembly context")
        profile, params, grid = self.context
        return assemble_mode_operator(self.xi, profile, params, grid.refined(extra),
                                      form=self.form, mass_constraints=self.mass_constraints)


def _complex_blocks(n_p, n_m):
    names = [("q", "plus", n_p), ("q", "minus", n_m)]
    names += [(f"u{i}", "plus", n_p) for i in (1, 2, 3)]
    names += [(f"u{i}", "minus", n_m) for i in (1, 2, 3)]
    names += [("eta", "plus", 1), ("eta", "minus", 1)]
    offsets, start = {}, 0
    for var, layer, n in names:
        offsets[(var, layer)] = slice(start, start + n)
        start += n
    return offsets, start


def assemble_full(xi, coeffs, params, profile, mass_constraints=False):
    """Complex collocated pencil for wavevector ``xi``.

    ``coeffs`` maps layer name to :class:`LayerCoefficients`.
    """
    xi1, xi2 = float(xi[0]), float(xi[1])
    k2 = xi1 * xi1 + xi2 * xi2
    cp, cm = coeffs["plus"], coeffs["minus"]
    off, N = _complex_blocks(cp.z.size, cm.z.size)
    A = np.zeros((N, N), complex)
    B = np.zeros((N, N))
    row_map = []

    def dops(c):
        n = c.z.size
        eye = np.eye(n)
        return [1j * xi1 * eye, 1j * xi2 * eye, c.D.astype(complex)]

    stress = {}
    for layer, c in coeffs.items():
        n = c.z.size
        d = dops(c)
        qs = off[("q", layer)]
        us = [off[(f"u{i}", layer)] for i in (1, 2, 3)]
        R = np.diag(c.rho)
        # continuity is imposed on the Chebyshev coefficients 0..n-2; the top
        # coefficient of q is pinned to zero, which removes the spurious
        # T_{n-1} "pressure" mode that the interior momentum rows cannot see
        Vinv = cheb_coefficient_matrix(n)
        B[qs, qs] = Vinv
        B[qs.stop - 1, qs] = 0.0
        for j in range(3):
            A[qs, us[j]] = -(Vinv @ d[j] @ R)
        A[qs.stop - 1, :] = 0.0
        A[qs.stop - 1, qs] = Vinv[-1]
        lap = sum(dj @ dj for dj in d)
        bulk = c.mu / 3.0 + c.mu_prime
        for i in range(3):
            B[us[i], us[i]] = R
            A[us[i], qs] = -R @ d[i] @ np.diag(c.h_prime)
            A[us[i], us[i]] += c.mu * lap
            for j in range(3):
                A[us[i], us[j]] += bulk * (d[i] @ d[j])
        row_map.append((slice(qs.start, qs.stop - 1), f"continuity[{layer}]"))
        row_map.append((slice(qs.stop - 1, qs.stop), f"q_top_coefficient[{layer}]"))
        # traction rows (P'q delta_i3 - S_i3) at both end nodes, as full-width rows
        trac = {}
        for end, idx in (("top", n - 1), ("bottom", 0)):
            rows = np.zeros((3, N), complex)
            for i in range(3):
                rows[i, us[i]] += c.mu * (-d[2][idx])
                rows[i, us[2]] += c.mu * (-d[i][idx])
            lam2 = c.mu_prime - 2.0 * c.mu / 3.0
            for j in range(3):
                rows[2, us[j]] += -lam2 * d[j][idx]
            rows[2, qs.start + idx] += c.P_prime[idx]
            trac[end] = rows
        stress[layer] = trac

    up = [off[(f"u{i}", "plus")] for i in (1, 2, 3)]
    um = [off[(f"u{i}", "minus")] for i in (1, 2, 3)]
    ep, em = off[("eta", "plus")].start, off[("eta", "minus")].start
    n_p, n_m = cp.z.size, cm.z.size
    rho1 = profile.rho1
    jump = profile.jump
    g = params.g
    for i in range(3):
        # top surface: traction balance
        r = up[i].start + n_p - 1
        A[r], B[r] = stress["plus"]["top"][i], 0.0
        if i == 2:
            A[r, ep] -= rho1 * g + params.sigma_plus * k2
        row_map.append((slice(r, r + 1), f"stress[Sigma_plus,{i + 1}]"))
        # interface: velocity continuity on the upper-layer bottom node
        r = up[i].start
        A[r], B[r] = 0.0, 0.0
        A[r, up[i].start] = 1.0
        A[r, um[i].start + n_m - 1] = -1.0
        row_map.append((slice(r, r + 1), f"velocity_jump[{i + 1}]"))
        # interface: traction jump on the lower-layer top node
        r = um[i].start + n_m - 1
        A[r] = stress["plus"]["bottom"][i] - stress["minus"]["top"][i]
        B[r] = 0.0
        if i == 2:
            A[r, em] -= jump * g - params.sigma_minus * k2
        row_map.append((slice(r, r + 1), f"stress_jump[Sigma_minus,{i + 1}]"))
        # bottom: no slip
        r = um[i].start
        A[r], B[r] = 0.0, 0.0
        A[r, r] = 1.0
        row_map.append((slice(r, r + 1), f"dirichlet[Sigma_b,{i + 1}]"))
        for lay, us_ in (("plus", up), ("minus", um)):
            n = n_p if lay == "plus" else n_m
            row_map.append((slice(us_[i].start + 1, us_[i].start + n - 1),
                            f"momentum[{lay},{i + 1}]"))

    if mass_constraints and k2 == 0.0:
        A[ep], B[ep] = 0.0, 0.0
        A[ep, off[("q", "plus")]] = cp.w
        A[ep, ep] = rho1
        A[ep, em] = -profile.rho_top_of_interface
        A[em], B[em] = 0.0, 0.0
        A[em, off[("q", "minus")]] = cm.w
        A[em, em] = profile.rho_bot_of_interface
        row_map.append((slice(ep, ep + 1), "mass_constraint[plus]"))
        row_map.append((slice(em, em + 1), "mass_constraint[minus]"))
    else:
        B[ep, ep] = 1.0
        A[ep, up[2].start + n_p - 1] = 1.0
        B[em, em] = 1.0
        A[em, um[2].start + n_m - 1] = 1.0
        row_map.append((slice(ep, ep + 1), "kinematic[Sigma_plus]"))
        row_map.append((slice(em, em + 1), "kinematic[Sigma_minus]"))
    return A, B, off, row_map


def _to_real_form(A, B, off):
    """Rotate to the real reduced form (drop ``u2``, write ``u1 = i w``)."""
    N = A.shape[0]
    keep = np.ones(N, bool)
    scale = np.ones(N, complex)
    for layer in SURFACES:
        keep[off[("u2", layer)]] = False
        scale[off[("u1", layer)]] = 1j
    Ar = (np.conj(scale)[:, None] * A * scale[None, :])[np.ix_(keep, keep)]
    Br = (np.conj(scale)[:, None] * B * scale[None, :])[np.ix_(keep, keep)]
    if np.max(np.abs(Ar.imag), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(Ar.real))):
        raise NumericalError("real reduction left an imaginary residue")
    new_off, start = {}, 0
    for key, sl in sorted(off.items(), key=lambda kv: kv[1].start):
        if key[0] == "u2":
            continue
        n = sl.stop - sl.start
        name = ("w", key[1]) if key[0] == "u1" else key
        new_off[name] = slice(start, start + n)
        start += n
    return Ar.real.copy(), Br.real.copy(), new_off


def assemble_mode_operator(xi, profile, params, grid, form="real", mass_constraints=False):
    """Assemble the collocated linear pencil for wavevector ``xi``.

    Parameters
    ----------
    form : {"real", "complex"}
        ``"real"`` rotates ``xi`` onto the first axis (the pencil depends on
        ``|xi|`` only) and returns a real pencil of size ``6 N_v + 2``;
        ``"complex"`` keeps all three velocity components.
    mass_constraints : bool
        At ``xi = 0`` replace the kinematic rows by the linearised mass
        constraints, removing the two marginal mass-redistribution modes.
    """
    xi = (float(xi[0]), float(xi[1]))
    coeffs = {layer: layer_coefficients(profile, params, grid, layer) for layer in SURFACES}
    if form == "complex":
        A, B, off, rows = assemble_full(xi, coeffs, params, profile, mass_constraints)
        return ModeOperator(xi, A, B, off, rows, form, mass_constraints, (profile, params, grid))
    if form != "real":
        raise ValueError(f"unknown form {form!r}")
    k = math.hypot(*xi)
    A, B, off, rows = assemble_full((k, 0.0), coeffs, params, profile, mass_constraints)
    Ar, Br, new_off = _to_real_form(A, B, off)
    return ModeOperator(xi, Ar, Br, new_off, _reindex_rows(rows, off, new_off), form,
                        mass_constraints, (profile, params, grid))


def _reindex_rows(rows, old, new):
    out = []
    for sl, label in rows:
        key = next(k for k, s in old.items() if s.start <= sl.start < s.stop)
        if key[0] == "u2":
            continue
        nk = ("w", key[1]) if key[0] == "u1" else key
        shift = new[nk].start - old[key].start
        out.append((slice(sl.start + shift, sl.stop + shift), label.replace(",1]", ",par]")))
    return out


# ---------------------------------------------------------------------------
# eigenvalues
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GrowthRateResult:
    """Largest-real-part finite eigenvalue of a mode pencil."""

    xi: tuple
    lambda_max: complex
    spectrum: np.ndarray
    stable: bool
    n_discarded: int = 0
    marginal: tuple = ()

    @property
    def re_lambda_max(self):
        return float(self.lambda_max.real)


def pencil_eigenvalues(A, B, cutoff=SPURIOUS_CUTOFF):
    """Finite generalised eigenvalues of ``A x = lambda B x`` below ``cutoff``.

    Returns ``(kept, n_discarded)``.
    """
    try:
        alpha, beta = sla.eig(A, B, right=False, homogeneous_eigvals=True,
                              check_finite=True, overwrite_a=False, overwrite_b=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(A) if A.size else float("nan")
        raise NumericalError(f"generalised eigensolve failed (cond(A) = {cond:.3e}): {exc}") from exc
    finite = np.abs(beta) > 0
    lam = np.full(alpha.shape, np.inf, complex)
    lam[finite] = alpha[finite] / beta[finite]
    ok = np.isfinite(lam) & (np.abs(lam) <= cutoff)
    return lam[ok], int(np.count_nonzero(~ok))


def growth_rate(op, cutoff=SPURIOUS_CUTOFF, verify=False, tol=STABLE_TOL, match_rtol=1e-6):
    """Solve the pencil and report the most unstable retained eigenvalue.

    Parameters
    ----------
    op : ModeOperator or object with ``A_mat`` and ``B_mat``
    verify : bool
        Keep only eigenvalues that reappear (within ``match_rtol``) when the
        operator is reassembled with 8 more nodes per layer.
    """
    lam, dropped = pencil_eigenvalues(np.asarray(op.A_mat), np.asarray(op.B_mat), cutoff)
    if verify:
        fine, _ = pencil_eigenvalues(op.refine().A_mat, op.refine().B_mat, cutoff)
        keep = np.array([np.min(np.abs(fine - z)) <= match_rtol * max(1.0, abs(z)) for z in lam],
                        bool) if fine.size else np.zeros(lam.size, bool)
        dropped += int(np.count_nonzero(~keep))
        lam = lam[keep]
    if lam.size == 0:
        raise NumericalError("no finite eigenvalues retained")
    marginal = ()
    xi = tuple(getattr(op, "xi", (0.0, 0.0)))
    if getattr(op, "form", None) and math.hypot(*xi) == 0.0 and not op.mass_constraints:
        # mass-redistribution modes sit at zero; report them separately
        zero = np.abs(lam) <= 1e-8 * max(1.0, float(np.max(np.abs(lam))))
        marginal = tuple(lam[zero])
        lam = lam[~zero]
    order = np.argsort(-lam.real, kind="stable")
    lam = lam[order]
    top = complex(lam[0])
    if abs(top.imag) > 0 and np.any(np.isclose(lam, np.conj(top))):
        top = complex(top.real, abs(top.imag))
    return GrowthRateResult(xi, top, lam, bool(top.real < tol), dropped, marginal)


def stability_verdict(profile, params, grid, modes=None, verify=False):
    """Growth rates over lattice modes; returns ``(max_re, results)``."""
    modes = modes if modes is not None else lattice_modes(params.L1, params.L2, nmax=2)
    results = []
    for xi in modes:
        op = assemble_mode_operator(xi, profile, params, grid, mass_constraints=True)
        results.append(growth_rate(op, verify=verify))
    return max(r.re_lambda_max for r in results), results


def lattice_modes(L1, L2, nmax=2, include_zero=False, distinct=True):
    """Wavevectors ``(n1/L1, n2/L2)`` with ``|n_i| <= nmax``.

    With ``distinct`` only one representative per value of ``|xi|`` is kept
    (the real pencil depends on ``|xi|`` only), ordered by ``|xi|``.
    """
    out = {}
    for n1 in range(-nmax, nmax + 1):
        for n2 in range(-nmax, nmax + 1):
            if n1 == 0 and n2 == 0 and not include_zero:
                continue
            xi = (n1 / L1, n2 / L2)
            key = round(math.hypot(*xi), 12) if distinct else xi
            if key not in out or (distinct and xi > out[key]):
                out[key] = xi
    return [out[k] for k in sorted(out, key=lambda k: (k if distinct else math.hypot(*k)))]


# ---------------------------------------------------------------------------
# neutral surface tension
# ---------------------------------------------------------------------------
def find_neutral_sigma(profile, params, grid, xi, bracket=None, tol=None, max_iter=200):
    """Bisection on ``sigma_minus`` for the sign change of ``Re lambda_max(xi)``.

    ``sigma_plus`` is held at ``params.sigma_plus`` when positive and tied to
    the trial ``sigma_minus`` otherwise.  The default bracket is
    ``[1e-6, 4] * |jump| g max(L1, L2)**2``; the tolerance defaults to
    ``1e-4`` times that scale.

    Raises
    ------
    BracketError
        If the growth rate has the same sign at both ends.
    """
    scale = abs(profile.jump) * params.g * params.max_L_sq
    if scale == 0.0:
        raise BracketError("zero density jump: no neutral surface tension")
    lo, hi = bracket if bracket is not None else (1e-6 * scale, 4.0 * scale)
    tol = tol if tol is not None else 1e-4 * scale

    def rate(sig):
        sp = params.sigma_plus if params.sigma_plus > 0 else sig
        p = params.replace(sigma_minus=sig, sigma_plus=sp)
        return growth_rate(assemble_mode_operator(xi, profile, p, grid)).re_lambda_max

    f_lo, f_hi = rate(lo), rate(hi)
    if not (f_lo > STABLE_TOL and f_hi < STABLE_TOL):
        raise BracketError(
            f"no unstable-to-stable change on [{lo}, {hi}]: rates {f_lo:.3e}, {f_hi:.3e}")
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if rate(mid) > STABLE_TOL:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Poincare constant and energy-form positivity
# ---------------------------------------------------------------------------
def sharp_poincare_constant(grid):
    """Smallest ``|xi|^2`` over nonzero retained lattice modes.

    Equals ``1 / max(L1, L2)**2`` whenever the truncation keeps the first
    mode in each direction.
    """
    k2 = grid.xi_abs**2
    return float(np.min(k2[k2 > 0]))


def poincare_ratio(zeta):
    """``||grad zeta||^2 / ||zeta||^2`` for a zero-mean surface field."""
    c = zeta.coeffs
    if abs(c[0, 0]) > 1e-12 * max(1.0, float(np.max(np.abs(c)))):
        raise ValueError("Poincare ratio requires a zero-mean field")
    den = float(np.sum(np.abs(c) ** 2))
    if den == 0.0:
        raise ValueError("zero field")
    return float(np.sum(zeta.grid.xi_abs**2 * np.abs(c) ** 2)) / den


@dataclass(frozen=True)
class PositivityReport:
    """Minimum Rayleigh quotient of the linear energy form.

    ``per_mode`` maps ``|xi|`` to the mode's minimum; ``minimum`` is the
    overall minimum with its ``argmin``.
    """

    minimum: float
    argmin: float
    per_mode: dict
    with_mass_constraints: bool

    @property
    def positive(self):
        return self.minimum > 0


def energy_form_positivity(profile, params, grid, with_mass_constraints=True):
    """Minimise the linear energy form over the discrete space.

    The form is ``int h'(rho) q^2 + (rho1 g + sigma+ |xi|^2) eta+^2 +
    (sigma- |xi|^2 - jump g) eta-^2`` per mode, normalised by
    ``int q^2 + eta+^2 + eta-^2``.  At ``xi = 0`` the linearised mass
    constraints tie the layer means of ``q`` to ``eta``.
    """
    cp = layer_coefficients(profile, params, grid, "plus")
    cm = layer_coefficients(profile, params, grid, "minus")
    g = params.g
    h_min = float(min(cp.h_prime.min(), cm.h_prime.min()))
    per_mode = {}
    for k in np.unique(np.round(grid.xi_abs.ravel(), 12)):
        k = float(k)
        if k > 0:
            per_mode[k] = min(h_min, profile.rho1 * g + params.sigma_plus * k * k,
                              params.sigma_minus * k * k - profile.jump * g)
            continue
        n_p, n_m = cp.z.size, cm.z.size
        N = n_p + n_m + 2
        Q = np.diag(np.concatenate([cp.w * cp.h_prime, cm.w * cm.h_prime,
                                    [profile.rho1 * g, -profile.jump * g]]))
        M = np.diag(np.concatenate([cp.w, cm.w, [1.0, 1.0]]))
        if with_mass_constraints:
            C = np.zeros((2, N))
            C[0, :n_p] = cp.w
            C[0, -2] = profile.rho1
            C[0, -1] = -profile.rho_top_of_interface
            C[1, n_p:n_p + n_m] = cm.w
            C[1, -1] = profile.rho_bot_of_interface
            Z = sla.null_space(C)
            Q, M = Z.T @ Q @ Z, Z.T @ M @ Z
        per_mode[k] = float(sla.eigh(Q, M, eigvals_only=True)[0])
    argmin = min(per_mode, key=per_mode.get)
    return PositivityReport(per_mode[argmin], argmin, per_mode, with_mass_constraints)
