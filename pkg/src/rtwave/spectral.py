"""Two-layer Fourier x Chebyshev discretisation.

Horizontal directions are periodic on ``(2*pi*L1) x (2*pi*L2)`` and are
represented by full ``fft2`` coefficients normalised so that

    f(x') = sum_xi  c_xi * exp(i xi . x'),   xi in (Z/L1) x (Z/L2).

The vertical direction is resolved separately in each layer by values at
Chebyshev-Gauss-Lobatto nodes, ascending in ``x3``.  The upper layer spans
``[0, ell]`` and the lower layer ``[-b, 0]``; both contain the interface
node ``x3 = 0`` as an endpoint, but the two layers are stored separately so
that discontinuous quantities (the density) are represented exactly.

Array layout everywhere is ``(*component_shape, N_h, N_h, nz)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

__all__ = [
    "Grid",
    "SurfaceField",
    "VolumeField",
    "cheb_nodes",
    "cheb_diff_matrix",
    "cheb_coefficient_matrix",
    "clenshaw_curtis_weights",
    "d_horizontal",
    "d_vertical",
    "sobolev_norm_surface",
    "sobolev_norm_volume",
    "l2_inner_surface",
    "trace",
    "jump",
    "integrate",
    "to_coeffs",
    "to_physical",
    "hermitian_defect",
    "horizontal_multiplier",
    "SURFACES",
]

RANK_SHAPES = {"scalar": (), "vector3": (3,), "tensor3x3": (3, 3)}
SURFACES = ("plus", "minus")


def cheb_nodes(n):
    """Chebyshev-Gauss-Lobatto nodes on [-1, 1] in ascending order."""
    return -np.cos(np.pi * np.arange(n) / (n - 1))


def cheb_diff_matrix(n):
    """Collocation differentiation matrix for ascending CGL nodes on [-1, 1]."""
    t = cheb_nodes(n)
    c = np.ones(n)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(n)
    dt = t[:, None] - t[None, :]
    D = np.outer(c, 1.0 / c) / (dt + np.eye(n))
    # negative-sum trick keeps D @ 1 == 0 to rounding
    D -= np.diag(D.sum(axis=1))
    return D


def cheb_coefficient_matrix(n):
    """Map nodal values at ascending CGL nodes to Chebyshev coefficients."""
    t = cheb_nodes(n)
    V = np.polynomial.chebyshev.chebvander(t, n - 1)
    return np.linalg.inv(V)


def clenshaw_curtis_weights(n):
    """Clenshaw-Curtis weights on [-1, 1] for the nodes of :func:`cheb_nodes`.

    Exact for polynomials of degree ``n - 1``.
    """
    N = n - 1
    theta = np.pi * np.arange(n) / N
    w = np.zeros(n)
    v = np.ones(n - 2)
    inner = slice(1, N)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N**2 - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k**2 - 1)
        v -= np.cos(N * theta[inner]) / (N**2 - 1)
    else:
        w[0] = w[N] = 1.0 / N**2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[inner]) / (4 * k**2 - 1)
    w[inner] = 2.0 * v / N
    # nodes are ascending (theta runs from x=-1 upward after the sign flip);
    # the weights are symmetric so no reordering is needed
    return w


@dataclass(frozen=True)
class Grid:
    """Discretisation of the two-layer slab.

    Parameters
    ----------
    L1, L2 : float
        Periodicity lengths; the horizontal torus has side ``2*pi*Li``.
    N_h : int
        FFT points per horizontal direction (modes ``|n| <= N_h/2``).
    N_v_plus, N_v_minus : int
        Number of Chebyshev nodes in the upper / lower layer.
    ell, b : float
        Layer heights.
    """

    L1: float = 1.0
    L2: float = 1.0
    N_h: int = 32
    N_v_plus: int = 64
    N_v_minus: int = 64
    ell: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.N_h < 4 or self.N_h % 2:
            raise ValueError(f"N_h must be even and >= 4, got {self.N_h}")
        if min(self.N_v_plus, self.N_v_minus) < 8:
            raise ValueError("N_v must be >= 8 in each layer")
        if self.N_v_plus % 2 or self.N_v_minus % 2:
            # the top Chebyshev coefficient of q is pinned to zero; it has zero
            # mean only for an even node count, which keeps mass exact
            raise ValueError("N_v must be even in each layer")
        for name in ("L1", "L2", "ell", "b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    # -- vertical -----------------------------------------------------------
    def nz(self, layer):
        return self.N_v_plus if layer == "plus" else self.N_v_minus

    def interval(self, layer):
        return (0.0, self.ell) if layer == "plus" else (-self.b, 0.0)

    def z(self, layer):
        lo, hi = self.interval(layer)
        return lo + (cheb_nodes(self.nz(layer)) + 1.0) * (hi - lo) / 2.0

    @cached_property
    def _dmats(self):
        out = {}
        for layer in SURFACES:
            lo, hi = self.interval(layer)
            out[layer] = cheb_diff_matrix(self.nz(layer)) * (2.0 / (hi - lo))
        return out

    def D(self, layer):
        return self._dmats[layer]

    def weights(self, layer):
        lo, hi = self.interval(layer)
        return clenshaw_curtis_weights(self.nz(layer)) * (hi - lo) / 2.0

    # -- horizontal ---------------------------------------------------------
    @cached_property
    def mode_index(self):
        """Integer lattice index along each FFT axis."""
        return np.fft.fftfreq(self.N_h, 1.0 / self.N_h).astype(int)

    @cached_property
    def xi(self):
        """Wavenumber arrays ``(xi1, xi2)`` of shape ``(N_h, N_h)``."""
        n = self.mode_index
        return (n[:, None] / self.L1 + 0.0 * n[None, :],
                0.0 * n[:, None] + n[None, :] / self.L2)

    @cached_property
    def xi_abs(self):
        xi1, xi2 = self.xi
        return np.hypot(xi1, xi2)

    @cached_property
    def dealias_mask(self):
        """2/3-rule mask: keep modes with ``3 |n_i| < N_h``."""
        n = np.abs(self.mode_index)
        keep = 3 * n < self.N_h
        return keep[:, None] & keep[None, :]

    @property
    def area(self):
        return 4.0 * np.pi**2 * self.L1 * self.L2

    def x_horizontal(self):
        j = np.arange(self.N_h)
        return (2 * np.pi * self.L1 * j / self.N_h,
                2 * np.pi * self.L2 * j / self.N_h)

    def mesh(self, layer):
        """Physical coordinates ``(x1, x2, x3)`` broadcast to ``(N_h, N_h, nz)``."""
        x1, x2 = self.x_horizontal()
        z = self.z(layer)
        return (x1[:, None, None] + 0 * z, x2[None, :, None] + 0 * z,
                np.broadcast_to(z, (self.N_h, self.N_h, z.size)))

    def volume(self):
        return self.area * (self.ell + self.b)

    def refined(self, extra=8):
        """Same grid with ``extra`` more Chebyshev nodes in each layer."""
        return Grid(self.L1, self.L2, self.N_h, self.N_v_plus + extra,
                    self.N_v_minus + extra, self.ell, self.b)


# ---------------------------------------------------------------------------
# transforms (physical <-> coefficients) along the two horizontal axes
# ---------------------------------------------------------------------------
def _hax(a, surface=False):
    return (-2, -1) if surface else (-3, -2)


def to_coeffs(values, surface=False):
    ax = _hax(values, surface)
    n = values.shape[ax[0]] * values.shape[ax[1]]
    return np.fft.fft2(values, axes=ax) / n


def to_physical(coeffs, surface=False):
    ax = _hax(coeffs, surface)
    n = coeffs.shape[ax[0]] * coeffs.shape[ax[1]]
    return np.fft.ifft2(coeffs * n, axes=ax).real


def hermitian_defect(coeffs, surface=False):
    """Max of ``|c(xi) - conj(c(-xi))|``; zero for real-valued fields."""
    ax = _hax(coeffs, surface)
    flipped = np.roll(np.flip(coeffs, axis=ax), shift=1, axis=ax)
    return float(np.max(np.abs(coeffs - np.conj(flipped)), initial=0.0))


@dataclass(frozen=True)
class SurfaceField:
    """Horizontally periodic scalar on ``Sigma_+`` or ``Sigma_-``."""

    coeffs: np.ndarray
    grid: Grid
    which_surface: str = "plus"

    def __post_init__(self):
        if self.which_surface not in SURFACES:
            raise ValueError(f"unknown surface {self.which_surface!r}")
        if self.coeffs.shape[-2:] != (self.grid.N_h, self.grid.N_h):
            raise ValueError("coefficient array does not match the grid truncation")

    @classmethod
    def from_physical(cls, values, grid, which_surface="plus"):
        return cls(to_coeffs(np.asarray(values, dtype=float), surface=True), grid,
                   which_surface)

    @classmethod
    def zeros(cls, grid, which_surface="plus"):
        return cls(np.zeros((grid.N_h, grid.N_h), complex), grid, which_surface)

    def physical(self):
        return to_physical(self.coeffs, surface=True)

    def is_real(self, tol=1e-12):
        scale = max(1.0, float(np.max(np.abs(self.coeffs), initial=0.0)))
        return hermitian_defect(self.coeffs, surface=True) <= tol * scale

    def mean(self):
        return self.coeffs[..., 0, 0].real

    def replace(self, coeffs):
        return SurfaceField(coeffs, self.grid, self.which_surface)


@dataclass(frozen=True)
class VolumeField:
    """Two-layer field: Fourier coefficients in ``x'``, node values in ``x3``."""

    data_plus: np.ndarray
    data_minus: np.ndarray
    grid: Grid
    rank: str = "scalar"

    def __post_init__(self):
        lead = RANK_SHAPES[self.rank]
        g = self.grid
        for layer, arr in (("plus", self.data_plus), ("minus", self.data_minus)):
            want = lead + (g.N_h, g.N_h, g.nz(layer))
            if arr.shape != want:
                raise ValueError(f"{layer} layer has shape {arr.shape}, expected {want}")

    def layer(self, name):
        return self.data_plus if name == "plus" else self.data_minus

    @classmethod
    def from_physical(cls, plus, minus, grid, rank="scalar"):
        return cls(to_coeffs(np.asarray(plus, float)), to_coeffs(np.asarray(minus, float)),
                   grid, rank)

    @classmethod
    def from_function(cls, fn, grid):
        """Sample a scalar ``fn(x1, x2, x3)`` on both layers."""
        return cls.from_physical(fn(*grid.mesh("plus")), fn(*grid.mesh("minus")), grid)

    @classmethod
    def zeros(cls, grid, rank="scalar"):
        lead = RANK_SHAPES[rank]
        return cls(np.zeros(lead + (grid.N_h, grid.N_h, grid.N_v_plus), complex),
                   np.zeros(lead + (grid.N_h, grid.N_h, grid.N_v_minus), complex),
                   grid, rank)

    def physical(self):
        return to_physical(self.data_plus), to_physical(self.data_minus)

    def map(self, fn, rank=None):
        return VolumeField(fn(self.data_plus), fn(self.data_minus), self.grid,
                           rank or self.rank)

    def component(self, *idx):
        return VolumeField(self.data_plus[idx], self.data_minus[idx], self.grid, "scalar")

    def is_real(self, tol=1e-12):
        scale = max(1.0, float(np.max(np.abs(self.data_plus), initial=0.0)),
                    float(np.max(np.abs(self.data_minus), initial=0.0)))
        return max(hermitian_defect(self.data_plus),
                   hermitian_defect(self.data_minus)) <= tol * scale

    def __add__(self, other):
        return VolumeField(self.data_plus + other.data_plus,
                           self.data_minus + other.data_minus, self.grid, self.rank)

    def __sub__(self, other):
        return VolumeField(self.data_plus - other.data_plus,
                           self.data_minus - other.data_minus, self.grid, self.rank)

    def __mul__(self, scalar):
        return VolumeField(self.data_plus * scalar, self.data_minus * scalar,
                           self.grid, self.rank)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# derivatives
# ---------------------------------------------------------------------------
def horizontal_multiplier(grid, direction):
    xi1, xi2 = grid.xi
    if direction == 1:
        return 1j * xi1
    if direction == 2:
        return 1j * xi2
    raise ValueError("direction must be 1 or 2")


def d_horizontal(f, direction):
    """Exact horizontal derivative ``d/dx_direction`` of a band-limited field."""
    m = horizontal_multiplier(f.grid, direction)
    if isinstance(f, SurfaceField):
        return f.replace(f.coeffs * m)
    return VolumeField(f.data_plus * m[:, :, None], f.data_minus * m[:, :, None],
                       f.grid, f.rank)


def d_vertical(f):
    """Chebyshev collocation derivative in ``x3``, layer by layer."""
    g = f.grid
    return VolumeField(f.data_plus @ g.D("plus").T, f.data_minus @ g.D("minus").T,
                       g, f.rank)


def _partial(data, grid, layer, alpha):
    """Apply ``d1^a1 d2^a2 d3^a3`` to layer data (coefficient form)."""
    a1, a2, a3 = alpha
    out = data
    if a1 or a2:
        m = horizontal_multiplier(grid, 1) ** a1 * horizontal_multiplier(grid, 2) ** a2
        out = out * m[:, :, None]
    if a3:
        out = out @ np.linalg.matrix_power(grid.D(layer), a3).T
    return out


# ---------------------------------------------------------------------------
# norms and traces
# ---------------------------------------------------------------------------
def l2_inner_surface(f, g):
    """``int_{T^2} f * conj(g)`` by Parseval."""
    return f.grid.area * np.sum(f.coeffs * np.conj(g.coeffs))


def sobolev_norm_surface(f, s):
    """``H^s(T^2)`` norm via the Fourier multiplier ``(1 + |xi|^2)^s``.

    Normalised so that ``s = 0`` equals the L2 norm over the torus.
    """
    if not -2.0 <= s <= 6.0:
        raise ValueError(f"Sobolev index {s} outside the supported range [-2, 6]")
    weight = (1.0 + f.grid.xi_abs**2) ** s
    return float(np.sqrt(f.grid.area * np.sum(weight * np.abs(f.coeffs) ** 2)))


def _layer_l2_sq(data, grid, layer):
    w = grid.weights(layer)
    # sum over any component axes, horizontal modes, then vertical quadrature
    return grid.area * float(np.sum(np.abs(data) ** 2 * w))


def sobolev_norm_volume(f, k):
    """Integer-order ``H^k`` norm summed over both layers."""
    if k not in (0, 1, 2, 3):
        raise ValueError("volume Sobolev order must be 0, 1, 2 or 3")
    total = 0.0
    for alpha in product(range(k + 1), repeat=3):
        if sum(alpha) > k:
            continue
        for layer in SURFACES:
            total += _layer_l2_sq(_partial(f.layer(layer), f.grid, layer, alpha),
                                  f.grid, layer)
    return float(np.sqrt(total))


_TRACE_SPEC = {"Sigma_plus": ("plus", -1), "Sigma_minus_plus": ("plus", 0),
               "Sigma_minus_minus": ("minus", -1), "Sigma_b": ("minus", 0)}


def trace(f, where):
    """Boundary value of a scalar volume field.

    ``where`` is one of ``Sigma_plus`` (x3 = ell), ``Sigma_minus_plus`` (upper
    side of the interface), ``Sigma_minus_minus`` (lower side) or ``Sigma_b``.
    """
    try:
        layer, idx = _TRACE_SPEC[where]
    except KeyError:
        raise ValueError(f"unknown boundary {where!r}") from None
    surf = "plus" if where == "Sigma_plus" else "minus"
    return SurfaceField(f.layer(layer)[..., idx], f.grid, surf)


def jump(f):
    """Interfacial jump ``f_+ - f_-`` on ``Sigma_-``."""
    return SurfaceField(f.data_plus[..., 0] - f.data_minus[..., -1], f.grid, "minus")


def integrate(f):
    """Integral of a scalar volume field over each layer, ``(plus, minus)``."""
    g = f.grid
    return tuple(g.area * float(np.real(f.layer(layer)[0, 0] @ g.weights(layer)))
                 for layer in SURFACES)
