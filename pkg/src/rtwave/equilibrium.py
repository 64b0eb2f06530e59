"""Barotropic pressure laws and hydrostatic two-layer equilibria.

Each layer is at rest under gravity, so ``d P(rho)/dx3 = -g rho``.  Writing
``h(z) = int_ref^z P'(r)/r dr`` turns this into ``d h(rho)/dx3 = -g``, which
is inverted for the density.  The upper layer is anchored at the top by the
atmospheric pressure and the lower one at the interface by pressure balance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, interpolate, optimize

from .errors import AdmissibilityError, BracketError, DomainCoverageError, DomainError
from .spectral import cheb_nodes, clenshaw_curtis_weights

__all__ = [
    "PressureLaw",
    "PhysicalParams",
    "AdmissibilityReport",
    "EquilibriumProfile",
    "MassReport",
    "check_admissibility",
    "enthalpy",
    "invert_enthalpy",
    "build_equilibrium",
    "equilibrium_masses",
    "heights_from_masses",
    "critical_surface_tension",
]

DIVERGENCE_CAP = 1e12


@dataclass(frozen=True)
class PressureLaw:
    """Smooth, positive, strictly increasing pressure-density relation.

    Parameters
    ----------
    kind : {"polytropic", "tabulated"}
    K, alpha : float
        Polytropic law ``P(z) = K z**alpha`` (``K > 0``, ``alpha > 1``).
    table : array_like, shape (n, 2)
        Strictly increasing ``(density, pressure)`` pairs; interpolated with a
        monotone cubic (PCHIP), valid only on the tabulated density range.
    """

    kind: str = "polytropic"
    K: float = 1.0
    alpha: float = 2.0
    table: Optional[tuple] = None

    def __post_init__(self):
        if self.kind == "polytropic":
            if not (self.K > 0 and self.alpha > 1):
                raise ValueError("polytropic law needs K > 0 and alpha > 1")
        elif self.kind == "tabulated":
            t = np.asarray(self.table, dtype=float)
            if t.ndim != 2 or t.shape[1] != 2 or t.shape[0] < 4:
                raise ValueError("table must hold at least 4 (density, pressure) rows")
            if np.any(np.diff(t[:, 0]) <= 0) or np.any(np.diff(t[:, 1]) <= 0):
                raise ValueError("table must be strictly increasing in both columns")
            if t[0, 0] <= 0 or t[0, 1] <= 0:
                raise ValueError("tabulated densities and pressures must be positive")
            object.__setattr__(self, "table", tuple(map(tuple, t)))
            pchip = interpolate.PchipInterpolator(t[:, 0], t[:, 1])
            object.__setattr__(self, "_interp", pchip)
            # exact-to-rounding cumulative int P'(r)/r dr at the knots: P' is
            # quadratic on each piece so 12-point Gauss-Legendre suffices
            x, w = np.polynomial.legendre.leggauss(12)
            a, b = t[:-1, 0], t[1:, 0]
            r = 0.5 * (b - a)[:, None] * x + 0.5 * (a + b)[:, None]
            piece = 0.5 * (b - a) * np.sum(w * pchip(r, 1) / r, axis=1)
            object.__setattr__(self, "_H", np.concatenate([[0.0], np.cumsum(piece)]))
        else:
            raise ValueError(f"unknown pressure law kind {self.kind!r}")

    @classmethod
    def polytropic(cls, K, alpha):
        return cls("polytropic", float(K), float(alpha))

    @classmethod
    def tabulated(cls, density, pressure):
        return cls("tabulated", table=tuple(zip(map(float, density), map(float, pressure))))

    @property
    def domain(self):
        if self.kind == "polytropic":
            return (0.0, math.inf)
        return (self.table[0][0], self.table[-1][0])

    @property
    def pressure_range(self):
        if self.kind == "polytropic":
            return (0.0, math.inf)
        return (self.table[0][1], self.table[-1][1])

    def _check(self, z):
        z = np.asarray(z, dtype=float)
        lo, hi = self.domain
        bad = ~((z > lo) | ((z == lo) & (self.kind == "tabulated"))) | (z > hi)
        if np.any(bad) or np.any(~np.isfinite(z)):
            raise DomainError(f"density outside the law's domain ({lo}, {hi})")
        return z

    def P(self, z):
        z = self._check(z)
        if self.kind == "polytropic":
            return self.K * z**self.alpha
        return self._interp(z)

    def dP(self, z):
        z = self._check(z)
        if self.kind == "polytropic":
            return self.K * self.alpha * z ** (self.alpha - 1)
        return self._interp(z, 1)

    def d2P(self, z):
        z = self._check(z)
        if self.kind == "polytropic":
            return self.K * self.alpha * (self.alpha - 1) * z ** (self.alpha - 2)
        return self._interp(z, 2)

    def antiderivative(self, z):
        """``int_{z0}^z P'(r)/r dr`` from the start of a tabulated domain."""
        z = np.atleast_1d(self._check(z))
        knots = np.array([row[0] for row in self.table])
        i = np.clip(np.searchsorted(knots, z, side="right") - 1, 0, knots.size - 2)
        x, w = np.polynomial.legendre.leggauss(12)
        a = knots[i]
        r = 0.5 * (z - a)[:, None] * x + 0.5 * (z + a)[:, None]
        part = 0.5 * (z - a) * np.sum(w * self._interp(r, 1) / r, axis=1)
        return self._H[i] + part

    def inverse(self, p):
        """Density with ``P(rho) = p``."""
        lo, hi = self.pressure_range
        if not lo < p <= hi and not (self.kind == "tabulated" and p == lo):
            raise DomainError(f"pressure {p} outside the range of the law")
        if self.kind == "polytropic":
            return (p / self.K) ** (1.0 / self.alpha)
        d0, d1 = self.domain
        if p == lo:
            return d0
        if p == hi:
            return d1
        return optimize.brentq(lambda z: float(self._interp(z)) - p, d0, d1,
                               xtol=1e-15, rtol=4 * np.finfo(float).eps)

    def to_dict(self):
        if self.kind == "polytropic":
            return {"kind": "polytropic", "K": self.K, "alpha": self.alpha}
        return {"kind": "tabulated", "table": [list(r) for r in self.table]}


@dataclass(frozen=True)
class PhysicalParams:
    """Physical constants of the two-layer problem."""

    g: float = 1.0
    p_atm: float = 1.0
    ell: float = 1.0
    b: float = 1.0
    L1: float = 1.0
    L2: float = 1.0
    mu_plus: float = 1.0
    mu_minus: float = 1.0
    mu_prime_plus: float = 0.0
    mu_prime_minus: float = 0.0
    sigma_plus: float = 0.0
    sigma_minus: float = 0.0

    def __post_init__(self):
        for name in ("g", "p_atm", "ell", "b", "L1", "L2", "mu_plus", "mu_minus"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("mu_prime_plus", "mu_prime_minus", "sigma_plus", "sigma_minus"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if (self.sigma_plus > 0) != (self.sigma_minus > 0):
            raise ValueError("surface tensions must be both zero or both positive")

    @property
    def area(self):
        return 4.0 * math.pi**2 * self.L1 * self.L2

    @property
    def max_L_sq(self):
        return max(self.L1, self.L2) ** 2

    def mu(self, layer):
        return self.mu_plus if layer == "plus" else self.mu_minus

    def mu_prime(self, layer):
        return self.mu_prime_plus if layer == "plus" else self.mu_prime_minus

    def replace(self, **kw):
        d = dict(self.__dict__)
        d.update(kw)
        return PhysicalParams(**d)


# ---------------------------------------------------------------------------
# enthalpy
# ---------------------------------------------------------------------------
def _integrand(law):
    return lambda r: float(law.dP(r)) / r


def enthalpy(law, ref_density, z):
    """``int_ref^z P'(r)/r dr`` by adaptive quadrature.

    Vectorised over ``z``.  Raises :class:`DomainError` for densities outside
    the law's domain.
    """
    law._check(ref_density)
    zz = law._check(z)
    if law.kind == "tabulated":
        out = (law.antiderivative(np.ravel(zz)) - law.antiderivative(ref_density)[0])
        out = out.reshape(np.shape(zz))
        return float(out) if out.ndim == 0 else out
    f = _integrand(law)
    flat = [integrate.quad(f, ref_density, float(zi), epsabs=0.0, epsrel=1e-13,
                           limit=200)[0] for zi in np.ravel(zz)]
    out = np.asarray(flat).reshape(np.shape(zz))
    return float(out) if out.ndim == 0 else out


def _polytropic_enthalpy(law, ref, z):
    a = law.alpha
    return law.K * a / (a - 1) * (np.asarray(z) ** (a - 1) - ref ** (a - 1))


def invert_enthalpy(law, ref_density, target, rtol=1e-12):
    """Solve ``h(z) = target`` for ``z >= ref_density``.

    Safeguarded Newton iteration inside a bisection bracket; ``h`` is strictly
    increasing so the bracket is always valid once found.
    """
    if target < 0:
        raise ValueError("enthalpy target must be nonnegative")
    if target == 0:
        return float(ref_density)
    lo_dom, hi_dom = law.domain
    h = lambda z: enthalpy(law, ref_density, z)
    lo, hi = float(ref_density), float(ref_density)
    h_hi = 0.0
    # grow the bracket geometrically
    while h_hi < target:
        lo = hi
        hi = min(2.0 * hi, hi_dom)
        h_hi = h(hi)
        if hi == hi_dom and h_hi < target:
            raise BracketError("enthalpy target not reachable within the law's domain")
        if not math.isfinite(hi) or hi > 1e300:
            raise BracketError("enthalpy bracket diverged")
    z = 0.5 * (lo + hi)
    for _ in range(200):
        r = h(z) - target
        if r > 0:
            hi = z
        else:
            lo = z
        step = r / (float(law.dP(z)) / z)
        z_new = z - step
        if not lo < z_new < hi:
            z_new = 0.5 * (lo + hi)
        if abs(z_new - z) <= rtol * abs(z_new) or hi - lo <= rtol * abs(hi):
            return z_new
        z = z_new
    raise BracketError("enthalpy inversion did not converge")


def _improper_bound(law, ref, g):
    """``(1/g) int_ref^top P'(r)/r dr`` with ``top`` the end of the domain.

    Returns ``inf`` when partial integrals exceed the divergence cap.
    """
    lo, hi = law.domain
    if ref >= hi:
        raise DomainCoverageError("tabulated law has no range above the reference density")
    f = _integrand(law)
    if math.isfinite(hi):
        return float(enthalpy(law, ref, hi)) / g
    total, a = 0.0, ref
    while True:
        b = 2.0 * a
        total += integrate.quad(f, a, b, limit=200)[0]
        if total > DIVERGENCE_CAP:
            return math.inf
        tail = integrate.quad(f, b, 4 * b, limit=200)[0]
        if tail <= 1e-15 * max(total, 1e-300) or b > 1e200:
            return (total + tail) / g
        a = b


# ---------------------------------------------------------------------------
# admissibility
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AdmissibilityReport:
    """Outcome of the four admissibility conditions.

    ``passed[i]`` is None when an earlier failure made condition ``i + 1``
    undecidable.  ``bound_ell`` and ``bound_b`` are the quadrature bounds
    of conditions 2 and 4 (``inf`` when the integral diverges).
    """

    passed: tuple
    bound_ell: Optional[float]
    bound_b: Optional[float]
    rho1: Optional[float] = None
    rho_plus_interface: Optional[float] = None
    rho_minus_interface: Optional[float] = None
    messages: tuple = ()

    @property
    def ok(self):
        return all(p is True for p in self.passed)

    def first_failure(self):
        for i, p in enumerate(self.passed):
            if p is not True:
                return i + 1, self.messages[i]
        return None


def check_admissibility(law_plus, law_minus, params):
    """Evaluate the four admissibility conditions for the given heights."""
    passed = [None] * 4
    msgs = [""] * 4
    bound_ell = bound_b = rho1 = rp = rm = None
    g = params.g

    lo, hi = law_plus.pressure_range
    in_range = lo < params.p_atm <= hi or (law_plus.kind == "tabulated" and params.p_atm == lo)
    passed[0] = bool(in_range)
    if not in_range:
        msgs[0] = f"p_atm = {params.p_atm} not in the range of P_+ ({lo}, {hi})"
        return AdmissibilityReport(tuple(passed), None, None, messages=tuple(msgs))
    rho1 = law_plus.inverse(params.p_atm)

    bound_ell = _improper_bound(law_plus, rho1, g)
    passed[1] = bool(0 < params.ell < bound_ell)
    if not passed[1]:
        msgs[1] = f"ell = {params.ell} not below the bound {bound_ell}"
        return AdmissibilityReport(tuple(passed), bound_ell, None, rho1, messages=tuple(msgs))
    if law_plus.kind == "polytropic":
        rp = _polytropic_inverse_enthalpy(law_plus, rho1, g * params.ell)
    else:
        rp = invert_enthalpy(law_plus, rho1, g * params.ell)

    p_int = float(law_plus.P(rp))
    lo, hi = law_minus.pressure_range
    passed[2] = bool(lo < p_int <= hi or (law_minus.kind == "tabulated" and p_int == lo))
    if not passed[2]:
        msgs[2] = f"interface pressure {p_int} not in the range of P_- ({lo}, {hi})"
        return AdmissibilityReport(tuple(passed), bound_ell, None, rho1, rp, messages=tuple(msgs))
    rm = law_minus.inverse(p_int)

    bound_b = _improper_bound(law_minus, rm, g)
    passed[3] = bool(0 < params.b < bound_b)
    if not passed[3]:
        msgs[3] = f"b = {params.b} not below the bound {bound_b}"
    return AdmissibilityReport(tuple(passed), bound_ell, bound_b, rho1, rp, rm, tuple(msgs))


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------
def _polytropic_inverse_enthalpy(law, ref, target):
    a = law.alpha
    return (ref ** (a - 1) + target * (a - 1) / (law.K * a)) ** (1.0 / (a - 1))


def critical_surface_tension(jump, g, L1, L2):
    """``jump * g * max(L1, L2)**2``; nonpositive values mean no threshold."""
    return jump * g * max(L1, L2) ** 2


@dataclass(frozen=True)
class EquilibriumProfile:
    """Hydrostatic two-layer equilibrium.

    The profile is sampled at Chebyshev-Gauss-Lobatto nodes (``z_plus``,
    ``rho_plus`` and ``z_minus``, ``rho_minus``, ascending in ``x3``) and can
    be re-evaluated at arbitrary heights with :meth:`density`.
    """

    law_plus: PressureLaw
    law_minus: PressureLaw
    params: PhysicalParams
    rho1: float
    rho_top_of_interface: float
    rho_bot_of_interface: float
    jump: float
    sigma_c: float
    M_plus: float
    M_minus: float
    z_plus: np.ndarray = field(repr=False)
    rho_plus: np.ndarray = field(repr=False)
    z_minus: np.ndarray = field(repr=False)
    rho_minus: np.ndarray = field(repr=False)
    method: str = "closed"

    def law(self, layer):
        return self.law_plus if layer == "plus" else self.law_minus

    def density(self, layer, z):
        """Equilibrium density of ``layer`` at heights ``z``."""
        z = np.asarray(z, dtype=float)
        g = self.params.g
        if layer == "plus":
            law, ref, target = self.law_plus, self.rho1, g * (self.params.ell - z)
        else:
            law, ref, target = self.law_minus, self.rho_bot_of_interface, -g * z
        if np.any(target < -1e-14 * max(1.0, g)):
            raise DomainError("height outside the layer")
        target = np.maximum(target, 0.0)
        if self.method == "closed" and law.kind == "polytropic":
            return _polytropic_inverse_enthalpy(law, ref, target)
        out = np.array([invert_enthalpy(law, ref, float(t)) for t in np.ravel(target)])
        return out.reshape(np.shape(target)) if out.size > 1 or np.ndim(target) else float(out[0])

    def derivatives(self, layer, z):
        """``(rho, rho', rho'')`` in ``x3`` from the hydrostatic balance."""
        rho = np.asarray(self.density(layer, z), dtype=float)
        law, g = self.law(layer), self.params.g
        dP, d2P = law.dP(rho), law.d2P(rho)
        d1 = -g * rho / dP
        d2 = -g * d1 * (dP - rho * d2P) / dP**2
        return rho, d1, d2

    def h_prime(self, layer, rho):
        """``h'(rho) = P'(rho)/rho``."""
        return self.law(layer).dP(rho) / rho

    def summary(self):
        return {
            "rho1": self.rho1,
            "rho_plus_interface": self.rho_top_of_interface,
            "rho_minus_interface": self.rho_bot_of_interface,
            "jump": self.jump,
            "sigma_c": self.sigma_c,
            "M_plus": self.M_plus,
            "M_minus": self.M_minus,
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def rows(self):
        """``(x3, rho, layer)`` rows, lower layer first."""
        out = [(float(z), float(r), "minus") for z, r in zip(self.z_minus, self.rho_minus)]
        out += [(float(z), float(r), "plus") for z, r in zip(self.z_plus, self.rho_plus)]
        return out


def _cgl(lo, hi, n):
    return lo + (cheb_nodes(n) + 1.0) * (hi - lo) / 2.0


def build_equilibrium(law_plus, law_minus, params, n_samples=64, method="closed"):
    """Construct the hydrostatic profile.

    Parameters
    ----------
    method : {"closed", "inversion"}
        ``"closed"`` uses the explicit power-law formula when both laws are
        polytropic; ``"inversion"`` always inverts the quadrature enthalpy.

    Raises
    ------
    AdmissibilityError
        Carries the number of the first failed condition.
    """
    if method not in ("closed", "inversion"):
        raise ValueError(f"unknown method {method!r}")
    report = check_admissibility(law_plus, law_minus, params)
    if not report.ok:
        cond, msg = report.first_failure()
        raise AdmissibilityError(cond, msg)
    g = params.g
    rho1 = report.rho1
    if method == "closed" and law_plus.kind == "polytropic":
        rp = _polytropic_inverse_enthalpy(law_plus, rho1, g * params.ell)
    else:
        rp = invert_enthalpy(law_plus, rho1, g * params.ell)
    rm = law_minus.inverse(float(law_plus.P(rp)))
    jump = rp - rm
    proto = EquilibriumProfile(law_plus, law_minus, params, rho1, rp, rm, jump,
                               critical_surface_tension(jump, g, params.L1, params.L2),
                               0.0, 0.0, np.empty(0), np.empty(0), np.empty(0), np.empty(0),
                               method)
    zp = _cgl(0.0, params.ell, n_samples)
    zm = _cgl(-params.b, 0.0, n_samples)
    rhop = np.asarray(proto.density("plus", zp), dtype=float)
    rhom = np.asarray(proto.density("minus", zm), dtype=float)
    # pin the anchor values exactly
    rhop[-1], rhop[0], rhom[-1] = rho1, rp, rm
    area = params.area
    w_p = clenshaw_curtis_weights(n_samples) * params.ell / 2
    w_m = clenshaw_curtis_weights(n_samples) * params.b / 2
    return EquilibriumProfile(law_plus, law_minus, params, rho1, rp, rm, jump, proto.sigma_c,
                              area * float(w_p @ rhop), area * float(w_m @ rhom),
                              zp, rhop, zm, rhom, method)


@dataclass(frozen=True)
class MassReport:
    """Equilibrium masses by quadrature and by the pressure-difference formula."""

    M_plus: float
    M_minus: float
    M_plus_closed: float
    M_minus_closed: float

    def relative_gap(self):
        def rel(a, b):
            return abs(a - b) / max(abs(b), 1e-300)
        return max(rel(self.M_plus, self.M_plus_closed), rel(self.M_minus, self.M_minus_closed))

    def __iter__(self):
        return iter((self.M_plus, self.M_minus))


def equilibrium_masses(profile, params=None):
    """Masses of both layers by Clenshaw-Curtis quadrature and in closed form."""
    params = params or profile.params
    A, g = params.area, params.g
    p_int = float(profile.law_plus.P(profile.rho_top_of_interface))
    p_bot = float(profile.law_minus.P(profile.rho_minus[0]))
    return MassReport(profile.M_plus, profile.M_minus,
                      A / g * (p_int - params.p_atm), A / g * (p_bot - p_int))


def heights_from_masses(M_plus, M_minus, law_plus, law_minus, params):
    """Find ``(ell, b)`` producing the requested equilibrium masses.

    Two successive scalar root finds: ``ell`` from ``M_+`` alone, then ``b``
    from ``M_-`` with ``ell`` fixed.  Raises :class:`AdmissibilityError` if a
    root would leave the admissible region.
    """
    if M_plus <= 0 or M_minus <= 0:
        raise ValueError("masses must be positive")
    A, g = params.area, params.g
    lo, hi = law_plus.pressure_range
    if not lo < params.p_atm <= hi:
        raise AdmissibilityError(1, "p_atm not in the range of P_+")
    rho1 = law_plus.inverse(params.p_atm)
    bound_ell = _improper_bound(law_plus, rho1, g)

    def mass_plus(ell):
        rp = invert_enthalpy(law_plus, rho1, g * ell)
        return A / g * (float(law_plus.P(rp)) - params.p_atm)

    ell = _expanding_root(lambda e: mass_plus(e) - M_plus, bound_ell, 2)
    rp = invert_enthalpy(law_plus, rho1, g * ell)
    p_int = float(law_plus.P(rp))
    lo, hi = law_minus.pressure_range
    if not lo < p_int <= hi:
        raise AdmissibilityError(3, "interface pressure not in the range of P_-")
    rm = law_minus.inverse(p_int)
    bound_b = _improper_bound(law_minus, rm, g)

    def mass_minus(b):
        rb = invert_enthalpy(law_minus, rm, g * b)
        return A / g * (float(law_minus.P(rb)) - p_int)

    b = _expanding_root(lambda x: mass_minus(x) - M_minus, bound_b, 4)
    return ell, b


def _expanding_root(f, bound, condition):
    hi = 1.0 if not math.isfinite(bound) else 0.5 * bound
    lo = 0.0
    try:
        while f(hi) < 0:
            lo = hi
            if math.isfinite(bound):
                hi = 0.5 * (hi + bound)
                if bound - hi < 1e-14 * bound:
                    raise AdmissibilityError(condition, "requested mass exceeds the admissible range")
            else:
                hi *= 2.0
                if hi > 1e200:
                    raise AdmissibilityError(condition, "no admissible height found")
    except BracketError as exc:
        raise AdmissibilityError(condition, str(exc)) from exc
    return optimize.brentq(f, lo, hi, xtol=1e-15, rtol=1e-14)
