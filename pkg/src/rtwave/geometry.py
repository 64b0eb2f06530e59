"""Poisson extensions of the free surfaces and the flattening map.

The moving domain is mapped onto the fixed slab by
``x3 -> x3 + theta(x)`` with ``theta = b1(x3) * ext_plus + b2(x3) * ext_minus``,
where ``ext_plus`` decays downward from ``x3 = ell`` and ``ext_minus`` is a
two-sided extension from ``x3 = 0`` whose vertical derivatives match across
the interface up to order ``m``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import SingularVandermondeError
from .spectral import (SURFACES, Grid, VolumeField, _layer_l2_sq, _partial,
                       to_coeffs, to_physical)

__all__ = [
    "VandermondeCoeffs",
    "GeometryFields",
    "DiffeoReport",
    "vandermonde_coefficients",
    "poisson_extend_upper",
    "poisson_extend_lower",
    "cutoff_functions",
    "build_theta",
    "extend_theta",
    "smallness_check",
    "gradient_power_norm",
    "extension_ratio_bound",
]


# ---------------------------------------------------------------------------
# Vandermonde coefficients
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class VandermondeCoeffs:
    """Exponents ``lambdas`` and weights ``alphas`` with ``V alpha = 1``."""

    lambdas: tuple
    alphas: tuple

    @property
    def m(self):
        return len(self.lambdas) - 1

    def residuals(self):
        """``sum_j alpha_j (-lambda_j)**i - 1`` for ``i = 0..m`` (compensated sums)."""
        return np.array([math.fsum(a * (-l) ** i for a, l in zip(self.alphas, self.lambdas)) - 1.0
                         for i in range(self.m + 1)])


def vandermonde_coefficients(lambdas=None, m=4):
    """Solve ``V(lambda) alpha = (1, ..., 1)`` with ``V_ij = (-lambda_j)**i``.

    Row ``i`` says ``sum_j alpha_j p(-lambda_j) = p(1)`` for ``p(x) = x**i``, so
    ``alpha_j`` is the Lagrange basis polynomial of node ``-lambda_j``
    evaluated at 1, which avoids forming the ill-conditioned matrix.

    Parameters
    ----------
    lambdas : sequence of float, optional
        Strictly increasing positive exponents; defaults to ``1, ..., m + 1``.
    m : int
        Used only when ``lambdas`` is omitted.
    """
    if lambdas is None:
        lambdas = [float(j + 1) for j in range(m + 1)]
    lam = [float(x) for x in lambdas]
    if not lam:
        raise SingularVandermondeError("need at least one exponent")
    if lam[0] <= 0 or any(b <= a for a, b in zip(lam, lam[1:])):
        raise SingularVandermondeError(
            "exponents must be positive and strictly increasing; repeated values make V singular")
    alphas = tuple(math.prod((1.0 + lk) / (lk - lj) for k, lk in enumerate(lam) if k != j)
                   for j, lj in enumerate(lam))
    out = VandermondeCoeffs(tuple(lam), alphas)
    worst = float(np.max(np.abs(out.residuals())))
    if worst > 1e-10:
        raise SingularVandermondeError(f"Vandermonde residual {worst:.3e} exceeds 1e-10")
    return out


# ---------------------------------------------------------------------------
# extensions
# ---------------------------------------------------------------------------
def _upper_profile(k, z, ell, order=0):
    return k**order * np.exp(k * (z - ell))


def _lower_profile(k, z, layer, vc, order=0):
    if layer == "minus":
        return k**order * np.exp(k * z)
    out = np.zeros(np.broadcast(k, z).shape)
    for a, lam in zip(vc.alphas, vc.lambdas):
        out = out + a * (-lam * k) ** order * np.exp(-lam * k * z)
    return out


def poisson_extend_upper(eta_plus, grid, order=0):
    """Downward extension of ``eta_plus`` from ``x3 = ell``.

    ``order`` returns the ``order``-th vertical derivative instead, computed
    exactly from the exponential profile.
    """
    k = grid.xi_abs[:, :, None]
    parts = [eta_plus.coeffs[:, :, None] * _upper_profile(k, grid.z(layer), grid.ell, order)
             for layer in SURFACES]
    return VolumeField(parts[0], parts[1], grid)


def poisson_extend_lower(eta_minus, coeffs, grid, order=0):
    """Two-sided extension of ``eta_minus`` from the interface ``x3 = 0``."""
    k = grid.xi_abs[:, :, None]
    parts = [eta_minus.coeffs[:, :, None] * _lower_profile(k, grid.z(layer), layer, coeffs, order)
             for layer in SURFACES]
    return VolumeField(parts[0], parts[1], grid)


def _smoothstep(t, order=0):
    """Quintic ``10t^3 - 15t^4 + 6t^5`` clamped to [0, 1] and its derivatives."""
    t = np.clip(t, 0.0, 1.0)
    if order == 0:
        return t**3 * (10 - 15 * t + 6 * t**2)
    if order == 1:
        return 30 * t**2 * (1 - t) ** 2
    if order == 2:
        return 60 * t * (1 - t) * (1 - 2 * t)
    raise ValueError("order must be 0, 1 or 2")


def cutoff_functions(grid, layer, order=0):
    """Vertical cutoffs ``(b1, b2)`` (or their derivatives) at the layer nodes.

    ``b1`` rises from 0 at the interface to 1 at the top and vanishes in the
    lower layer; ``b2`` is 1 at the interface and 0 at the top and bottom.
    Both have vanishing first and second derivatives at all three levels.
    """
    z = grid.z(layer)
    if layer == "plus":
        s = _smoothstep(z / grid.ell, order) / grid.ell**order
        b1 = s
        b2 = (1.0 - s) if order == 0 else -s
    else:
        b1 = np.zeros_like(z)
        b2 = _smoothstep((z + grid.b) / grid.b, order) / grid.b**order
    return b1, b2


# ---------------------------------------------------------------------------
# geometry fields
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GeometryFields:
    """Flattening map data.

    Volume quantities are stored both as coefficient ``VolumeField`` objects
    and, for the pseudo-spectral products, as physical arrays keyed by layer
    in ``phys`` (``theta``, ``A``, ``B``, ``J``, ``K``, ``d3theta``).
    ``n_plus`` and ``n_minus`` hold the physical components of the non-unit
    normals ``(-d1 eta, -d2 eta, 1)`` with shape ``(3, N_h, N_h)``.
    """

    grid: Grid
    theta: VolumeField
    A: VolumeField
    B: VolumeField
    J: VolumeField
    K: VolumeField
    n_plus: np.ndarray
    n_minus: np.ndarray
    phys: dict = field(repr=False)
    vander: VandermondeCoeffs = None

    @property
    def Amat(self):
        """The 3x3 matrix field ``[[1,0,-AK],[0,1,-BK],[0,0,K]]`` (coefficients)."""
        return VolumeField(*(to_coeffs(self.amat_physical(layer)) for layer in SURFACES),
                           self.grid, "tensor3x3")

    def amat_physical(self, layer):
        p = self.phys[layer]
        one = np.ones_like(p["K"])
        zero = np.zeros_like(p["K"])
        return np.array([[one, zero, -p["A"] * p["K"]],
                         [zero, one, -p["B"] * p["K"]],
                         [zero, zero, p["K"]]])


def extend_theta(eta_plus, eta_minus, grid, vander=None):
    """``b1 * P_plus(eta_plus) + b2 * P_minus(eta_minus)`` as a ``VolumeField``.

    The map is linear in the surface data; the simulator applies it to
    ``d eta / dt`` to obtain ``d theta / dt``.
    """
    vander = vander or vandermonde_coefficients(m=4)
    up = poisson_extend_upper(eta_plus, grid)
    lo = poisson_extend_lower(eta_minus, vander, grid)
    parts = []
    for layer in SURFACES:
        b1, b2 = cutoff_functions(grid, layer)
        parts.append(b1 * up.layer(layer) + b2 * lo.layer(layer))
    return VolumeField(parts[0], parts[1], grid)


def build_theta(eta_plus, eta_minus, grid, vander=None):
    """Assemble ``theta``, ``A``, ``B``, ``J``, ``K`` and the surface normals."""
    vander = vander or vandermonde_coefficients(m=4)
    up = [poisson_extend_upper(eta_plus, grid, order=o) for o in (0, 1)]
    lo = [poisson_extend_lower(eta_minus, vander, grid, order=o) for o in (0, 1)]
    xi1, xi2 = grid.xi
    coeff = {}
    phys = {}
    for layer in SURFACES:
        b1, b2 = cutoff_functions(grid, layer)
        db1, db2 = cutoff_functions(grid, layer, order=1)
        th = b1 * up[0].layer(layer) + b2 * lo[0].layer(layer)
        d3 = db1 * up[0].layer(layer) + b1 * up[1].layer(layer) \
            + db2 * lo[0].layer(layer) + b2 * lo[1].layer(layer)
        A = 1j * xi1[:, :, None] * th
        B = 1j * xi2[:, :, None] * th
        J = d3.copy()
        J[0, 0] += 1.0
        pJ = to_physical(J)
        pK = 1.0 / pJ
        coeff[layer] = dict(theta=th, A=A, B=B, J=J, K=to_coeffs(pK))
        phys[layer] = dict(theta=to_physical(th), A=to_physical(A), B=to_physical(B),
                           J=pJ, K=pK, d3theta=pJ - 1.0)
    vf = {name: VolumeField(coeff["plus"][name], coeff["minus"][name], grid)
          for name in ("theta", "A", "B", "J", "K")}

    def normal(eta):
        c = eta.coeffs
        return np.array([to_physical(-1j * xi1 * c, surface=True),
                         to_physical(-1j * xi2 * c, surface=True),
                         np.ones((grid.N_h, grid.N_h))])

    return GeometryFields(grid, vf["theta"], vf["A"], vf["B"], vf["J"], vf["K"],
                          normal(eta_plus), normal(eta_minus), phys, vander)


@dataclass(frozen=True)
class DiffeoReport:
    """Sup-norm deviations of the flattening map from the identity."""

    J_minus_1: float
    A_sup: float
    B_sup: float
    N_minus_e3: float
    K_minus_1_surface: float
    threshold: float = 0.5

    @property
    def volume_sum(self):
        return self.J_minus_1 + self.A_sup + self.B_sup

    @property
    def surface_sum(self):
        return self.N_minus_e3 + self.K_minus_1_surface

    @property
    def passed(self):
        return bool(self.volume_sum <= self.threshold and self.surface_sum <= self.threshold
                    and np.isfinite(self.volume_sum) and np.isfinite(self.surface_sum))


def smallness_check(fields):
    """Report ``|J-1| + |A| + |B|`` on the slab and ``|N-e3| + |K-1|`` on the surfaces."""
    p = fields.phys
    sup = lambda key, f=(lambda a: a): max(float(np.max(np.abs(f(p[layer][key]))))
                                           for layer in SURFACES)
    n_dev = max(float(np.max(np.hypot(n[0], n[1]))) for n in (fields.n_plus, fields.n_minus))
    k_surf = max(float(np.max(np.abs(p["plus"]["K"][..., -1] - 1))),
                 float(np.max(np.abs(p["plus"]["K"][..., 0] - 1))),
                 float(np.max(np.abs(p["minus"]["K"][..., -1] - 1))))
    return DiffeoReport(sup("J", lambda a: a - 1), sup("A"), sup("B"), n_dev, k_surf)


# ---------------------------------------------------------------------------
# extension norm bounds
# ---------------------------------------------------------------------------
def gradient_power_norm(f, q):
    """``||nabla^q f||_0`` over both layers, counting ordered index tuples.

    Each multi-index ``alpha`` with ``|alpha| = q`` enters with its
    multinomial multiplicity, matching the Frobenius norm of the tensor
    ``nabla^q f``.
    """
    total = 0.0
    for alpha in product(range(q + 1), repeat=3):
        if sum(alpha) != q:
            continue
        mult = math.factorial(q) // math.prod(math.factorial(a) for a in alpha)
        for layer in SURFACES:
            total += mult * _layer_l2_sq(_partial(f.layer(layer), f.grid, layer, alpha),
                                         f.grid, layer)
    return math.sqrt(total)


def _mode_extension_sq(k, q, grid, which, vander):
    """Exact ``||nabla^q ext(e^{i xi.x'})||^2 / area`` for one mode ``|xi| = k``.

    Horizontal derivative factors sum to ``|xi|^2`` per order, so the
    ordered-tuple count gives ``sum_j C(q, j) k^{2(q-j)} * int |d3^j profile|^2``.
    """
    total = 0.0
    for j in range(q + 1):
        h = math.comb(q, j) * k ** (2 * (q - j))
        if h == 0.0:
            continue
        total += h * _profile_sq_integral(k, j, grid, which, vander)
    return total


def _profile_sq_integral(k, j, grid, which, vander):
    ell, b = grid.ell, grid.b

    def expint(c, lo, hi):
        # int_lo^hi exp(c z) dz
        return hi - lo if c == 0 else (math.exp(c * hi) - math.exp(c * lo)) / c

    if which == "upper":
        return k ** (2 * j) * math.exp(-2 * k * ell) * expint(2 * k, -b, ell)
    below = k ** (2 * j) * expint(2 * k, -b, 0.0)
    above = 0.0
    for a1, l1 in zip(vander.alphas, vander.lambdas):
        for a2, l2 in zip(vander.alphas, vander.lambdas):
            above += a1 * a2 * (l1 * l2 * k * k) ** j * expint(-(l1 + l2) * k, 0.0, ell)
    return below + above


def extension_ratio_bound(grid, q, which="upper", vander=None):
    """Supremum over retained lattice modes of ``||nabla^q P f||_0 / ||f||_{H^{q-1/2}}``.

    Computed in closed form mode by mode; a band-limited field's ratio is a
    weighted mean of the per-mode ratios and therefore cannot exceed this.
    """
    vander = vander or vandermonde_coefficients(m=4)
    best = 0.0
    for k in np.unique(np.round(grid.xi_abs.ravel(), 14)):
        num = _mode_extension_sq(float(k), q, grid, which, vander)
        den = (1.0 + k * k) ** (q - 0.5)
        best = max(best, num / den)
    return math.sqrt(best)
