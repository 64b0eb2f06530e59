"""Post-processing and structural checks: decay fits, Korn and kernel checks,
the stability table and the vanishing surface tension experiment."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy import stats

from ..equilibrium import PressureLaw, build_equilibrium
from ..errors import ConfigError, DataError, DomainError, GeometryBreakdownError, NumericalError
from ..geometry import (extension_ratio_bound, gradient_power_norm, poisson_extend_lower,
                        poisson_extend_upper, vandermonde_coefficients)
from ..spectral import SurfaceField, cheb_diff_matrix, cheb_nodes, sobolev_norm_surface
from ..stability import assemble_mode_operator, growth_rate, lattice_modes

__all__ = [
    "DecayFit",
    "fit_decay",
    "decay_rate_factor",
    "is_nonincreasing",
    "korn_constant_estimate",
    "KornReport",
    "KernelReport",
    "deviatoric_kernel_check",
    "ExtensionReport",
    "extension_bound_check",
    "vandermonde_check",
    "lower_law_for_jump",
    "TableCell",
    "stability_table",
    "ConvergenceReport",
    "sigma_limit_experiment",
    "parallel_map",
]


def parallel_map(fn, items, threads=1):
    """``[fn(x) for x in items]`` on up to ``threads`` worker threads, order preserved."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# decay fits
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DecayFit:
    """Least-squares decay fit of a positive series.

    ``value`` is the rate (exponential model ``v ~ exp(-value t)``) or the
    exponent (algebraic model ``v ~ (1 + t)**(-value)``).
    """

    model: str
    value: float
    r_squared: float
    window: tuple
    n_points: int
    intercept: float

    @property
    def rate(self):
        return self.value if self.model == "exponential" else None

    @property
    def exponent(self):
        return self.value if self.model == "algebraic" else None

    def to_dict(self):
        return {"model": self.model, "value": self.value, "r_squared": self.r_squared,
                "window": list(self.window), "n_points": self.n_points}


def _series(series):
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError("series must be a sequence of (time, value) pairs")
    return arr[:, 0], arr[:, 1]


def _window(t, transient):
    t0, t1 = float(t[0]), float(t[-1])
    return t >= t0 + transient * (t1 - t0)


def fit_decay(series, model="exponential", transient=0.2):
    """Fit ``log(value)`` linearly in ``t`` or in ``log(1 + t)``.

    Parameters
    ----------
    series : sequence of (t, value)
        At least 20 samples, all values positive, times increasing.
    model : {"exponential", "algebraic"}
    transient : float
        Leading fraction of the time span excluded from the fit.

    Raises
    ------
    DataError
        Too few samples or a nonpositive value.
    """
    if model not in ("exponential", "algebraic"):
        raise ValueError(f"unknown decay model {model!r}")
    if not 0 <= transient < 1:
        raise ValueError("transient fraction must lie in [0, 1)")
    t, v = _series(series)
    if t.size < 20:
        raise DataError(f"decay fit needs at least 20 samples, got {t.size}")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise DataError("decay fit needs finite positive values")
    if np.any(np.diff(t) <= 0):
        raise DataError("times must be strictly increasing")
    keep = _window(t, transient)
    tw, vw = t[keep], v[keep]
    if tw.size < 3:
        raise DataError("fewer than 3 samples remain after the transient")
    x = tw if model == "exponential" else np.log1p(tw)
    y = np.log(vw)
    fit = stats.linregress(x, y)
    resid = y - (fit.intercept + fit.slope * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return DecayFit(model, float(-fit.slope), r2, (float(tw[0]), float(tw[-1])), int(tw.size),
                    float(fit.intercept))


def is_nonincreasing(series, transient=0.2, rtol=1e-10):
    """Whether the values never rise after the transient, up to ``rtol`` of the peak.

    Returns ``(flag, largest_increase)``.
    """
    t, v = _series(series)
    vw = v[_window(t, transient)]
    inc = float(np.max(np.diff(vw))) if vw.size > 1 else 0.0
    return inc <= rtol * float(np.max(np.abs(vw))), inc


def decay_rate_factor(sigma_plus, sigma_minus, jump, sigma_c):
    """Decay-rate constant ``M(sigma, jump)``.

    With a positive (or zero) jump, ``sigma_minus - sigma_c`` replaces
    ``sigma_minus`` and squares enter the denominator; with a negative jump
    the lower bound uses ``min(1, sigma_plus**2, sigma_minus**2)``.

    Raises
    ------
    DomainError
        Outside the surface tension ranges where decay is asserted.
    """
    if jump < 0:
        if not (sigma_plus > 0 and sigma_minus > 0):
            raise DomainError("a negative jump needs both surface tensions positive")
        num = min(1.0, sigma_plus, sigma_minus)
        den = min(1.0, sigma_plus**2, sigma_minus**2)
    else:
        s = sigma_minus - sigma_c
        if not (sigma_plus > 0 and s > 0):
            raise DomainError("needs sigma_plus > 0 and sigma_minus > sigma_c")
        num = min(1.0, sigma_plus, s)
        den = min(1.0, sigma_plus, s, sigma_plus**2, s**2)
    return max(1.0, num / den)


# ---------------------------------------------------------------------------
# deviatoric gradient
# ---------------------------------------------------------------------------
def _deviatoric(grad):
    """``D0 u = grad u + grad u^T - (2/3) div u I`` for ``grad[i, j] = d_j u_i``."""
    sym = grad + np.swapaxes(grad, 0, 1)
    div = np.trace(grad, axis1=0, axis2=1)
    eye = np.eye(3).reshape((3, 3) + (1,) * (grad.ndim - 2))
    return sym - (2.0 / 3.0) * div * eye


@dataclass(frozen=True)
class KornReport:
    """Minimum of ``||D0 u||^2 / ||u||_1^2`` over the constrained discrete space."""

    minimum: float
    argmin: tuple
    per_mode: dict
    dirichlet: bool


def _korn_mode(xi, grid, dirichlet):
    """Smallest generalised eigenvalue for one horizontal mode."""
    blocks = []
    for layer in ("plus", "minus"):
        n = grid.nz(layer)
        D = grid.D(layer)
        w = grid.weights(layer)
        blocks.append((n, D, w))
    sizes = [3 * blocks[0][0], 3 * blocks[1][0]]
    N = sum(sizes)
    Q = np.zeros((N, N), complex)
    M = np.zeros((N, N), complex)
    start = 0
    for n, D, w in blocks:
        eye = np.eye(n)
        dirs = [1j * xi[0] * eye, 1j * xi[1] * eye, D]
        # gradient operator: (i, j) -> d_j u_i as a (3, 3, n, 3n) map
        G = np.zeros((3, 3, n, 3 * n), complex)
        for i in range(3):
            for j in range(3):
                G[i, j, :, i * n:(i + 1) * n] = dirs[j]
        D0 = _deviatoric(G)
        W = np.diag(w)
        sl = slice(start, start + 3 * n)
        for i in range(3):
            for j in range(3):
                Q[sl, sl] += D0[i, j].conj().T @ W @ D0[i, j]
                M[sl, sl] += G[i, j].conj().T @ W @ G[i, j]
        for i in range(3):
            M[start + i * n:start + (i + 1) * n, start + i * n:start + (i + 1) * n] += W
        start += 3 * n
    n_p, n_m = blocks[0][0], blocks[1][0]
    rows = []
    for i in range(3):
        r = np.zeros(N)
        r[i * n_p] = 1.0                        # u_+ at the interface (first node)
        r[sizes[0] + i * n_m + n_m - 1] = -1.0  # u_- at the interface (last node)
        rows.append(r)
        if dirichlet:
            r = np.zeros(N)
            r[sizes[0] + i * n_m] = 1.0         # u_- at the bottom
            rows.append(r)
    Z = sla.null_space(np.array(rows))
    Qr = Z.T @ Q @ Z
    Mr = Z.T @ M @ Z
    Qr, Mr = (Qr + Qr.conj().T) / 2, (Mr + Mr.conj().T) / 2
    return float(sla.eigh(Qr, Mr, eigvals_only=True, subset_by_index=[0, 0])[0])


def korn_constant_estimate(grid, params=None, nmax=2, dirichlet=True, threads=1):
    """Discrete layered Korn constant.

    Minimises ``sum_layers ||D0 u||_0^2`` over ``||u||_1^2 = 1`` subject to
    continuity of ``u`` across the interface and, with ``dirichlet``,
    ``u = 0`` at the bottom.  The forms are invariant under horizontal
    translation, so the minimum is taken mode by mode over ``|n_i| <= nmax``
    (including the zero mode).
    """
    modes = [(0.0, 0.0)] + lattice_modes(grid.L1, grid.L2, nmax=nmax, distinct=False)
    vals = parallel_map(lambda xi: _korn_mode(xi, grid, dirichlet), modes, threads)
    per_mode = {tuple(float(v) for v in xi): val for xi, val in zip(modes, vals)}
    arg = min(per_mode, key=per_mode.get)
    return KornReport(per_mode[arg], arg, per_mode, dirichlet)


@dataclass(frozen=True)
class KernelReport:
    """Outcome of the deviatoric kernel checks."""

    max_residual: float
    samples: int
    constraint_rank: int
    unknowns: int

    @property
    def annihilated(self):
        return self.max_residual < 1e-10

    @property
    def unique_zero(self):
        return self.constraint_rank == self.unknowns


def _kernel_field(params, X):
    """``a + A x + gamma x + (beta . x) x - beta |x|^2 / 2`` at points ``X`` (3, ...)."""
    a, A, gamma, beta = params
    bx = np.tensordot(beta, X, axes=1)
    r2 = np.sum(X**2, axis=0)
    lin = np.tensordot(A, X, axes=1)
    return (a.reshape((3,) + (1,) * (X.ndim - 1)) + lin + gamma * X + bx * X
            - 0.5 * beta.reshape((3,) + (1,) * (X.ndim - 1)) * r2)


def _random_kernel_params(rng):
    a = rng.standard_normal(3)
    S = rng.standard_normal((3, 3))
    return a, S - S.T, float(rng.standard_normal()), rng.standard_normal(3)


def deviatoric_kernel_check(grid, samples=20, seed=0, n=None):
    """Discrete ``D0`` of random kernel polynomials and the bottom-plane rank test.

    The polynomial fields are sampled on a tensor Chebyshev box spanning one
    horizontal period and the lower layer's height range; spectral
    differentiation is exact for quadratics, so ``D0 u`` vanishes to
    rounding.  The ten kernel parameters are then constrained by ``u = 0``
    on the plane ``x3 = -b``; full rank means only the zero field survives.
    """
    n = n or max(8, grid.N_v_minus)
    rng = np.random.default_rng(seed)
    t = cheb_nodes(n)
    D = cheb_diff_matrix(n)
    spans = [(0.0, 2 * math.pi * grid.L1), (0.0, 2 * math.pi * grid.L2), (-grid.b, grid.ell)]
    axes = [lo + (t + 1) * (hi - lo) / 2 for lo, hi in spans]
    Ds = [D * 2.0 / (hi - lo) for lo, hi in spans]
    X = np.array(np.meshgrid(*axes, indexing="ij"))
    worst = 0.0
    for _ in range(samples):
        p = _random_kernel_params(rng)
        u = _kernel_field(p, X)
        grad = np.empty((3, 3) + u.shape[1:])
        for j in range(3):
            grad[:, j] = np.moveaxis(np.tensordot(Ds[j], u, axes=([1], [j + 1])), 0, j + 1)
        scale = max(1.0, float(np.max(np.abs(grad))))
        worst = max(worst, float(np.max(np.abs(_deviatoric(grad)))) / scale)
    # columns: the field's response to each of the ten parameters on x3 = -b
    P = X[:, :, :, 0].copy()
    P[2] = -grid.b
    cols = []
    for k in range(10):
        e = np.zeros(10)
        e[k] = 1.0
        params = (e[0:3], np.array([[0, e[3], e[4]], [-e[3], 0, e[5]], [-e[4], -e[5], 0]]),
                  e[6], e[7:10])
        cols.append(_kernel_field(params, P).ravel())
    rank = int(np.linalg.matrix_rank(np.array(cols).T))
    return KernelReport(worst, samples, rank, 10)


# ---------------------------------------------------------------------------
# extension bounds and Vandermonde identities
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ExtensionReport:
    """Worst ratio ``||nabla^q P f|| / ||f||_{q-1/2}`` against its modal supremum."""

    q: float
    which: str
    max_ratio: float
    bound: float
    samples: int

    @property
    def bounded(self):
        return math.isfinite(self.max_ratio) and self.max_ratio <= self.bound * (1 + 1e-6)


def extension_bound_check(grid, q, which="upper", samples=100, seed=0, vander=None):
    """Evaluate the extension ratio for random band-limited surface fields."""
    vander = vander or vandermonde_coefficients(m=4)
    rng = np.random.default_rng(seed)
    qi = int(round(q))
    if abs(q - qi) > 0 or qi < 0 or qi > 3:
        raise ValueError("q must be an integer in 0..3")
    bound = extension_ratio_bound(grid, qi, which, vander)
    mask = grid.dealias_mask
    worst = 0.0
    for _ in range(samples):
        vals = rng.standard_normal((grid.N_h, grid.N_h))
        f = SurfaceField.from_physical(vals, grid, "plus" if which == "upper" else "minus")
        f = f.replace(f.coeffs * mask)
        ext = poisson_extend_upper(f, grid) if which == "upper" else \
            poisson_extend_lower(f, vander, grid)
        ratio = gradient_power_norm(ext, qi) / sobolev_norm_surface(f, qi - 0.5)
        worst = max(worst, ratio)
    return ExtensionReport(float(q), which, worst, bound, samples)


def vandermonde_check(m_max=6):
    """Largest ``|sum_j alpha_j (-lambda_j)**i - 1|`` for each ``m <= m_max``."""
    return {m: float(np.max(np.abs(vandermonde_coefficients(m=m).residuals())))
            for m in range(1, m_max + 1)}


# ---------------------------------------------------------------------------
# stability table
# ---------------------------------------------------------------------------
def lower_law_for_jump(law_plus, params, jump, alpha_minus=2.0):
    """Polytropic lower law giving the requested density jump.

    The lower interface density is ``rho_plus_interface - jump`` and ``K``
    follows from pressure balance at the interface.
    """
    top = build_equilibrium(law_plus, PressureLaw.polytropic(1.0, alpha_minus), params, 16)
    rho_minus = top.rho_top_of_interface - jump
    if rho_minus <= 0:
        raise DomainError(f"jump {jump} leaves a nonpositive lower density")
    p_int = float(law_plus.P(top.rho_top_of_interface))
    return PressureLaw.polytropic(p_int / rho_minus**alpha_minus, alpha_minus)


@dataclass(frozen=True)
class TableCell:
    """One cell of the stability table."""

    jump_sign: int
    row: str
    jump: float
    sigma_plus: float
    sigma_minus: float
    re_lambda_max: float
    verdict: str
    expected: str

    @property
    def match(self):
        return self.verdict == self.expected

    def to_dict(self):
        return {"jump_sign": self.jump_sign, "row": self.row, "jump": self.jump,
                "sigma_plus": self.sigma_plus, "sigma_minus": self.sigma_minus,
                "re_lambda_max": self.re_lambda_max, "verdict": self.verdict,
                "expected": self.expected, "match": self.match}


_EXPECTED = {
    (-1, "zero"): "stable", (-1, "below"): "stable", (-1, "above"): "stable",
    (0, "zero"): "marginal", (0, "below"): "stable", (0, "above"): "stable",
    (1, "zero"): "unstable", (1, "below"): "unstable", (1, "above"): "stable",
}


def _classify(rate, margin):
    if rate > margin:
        return "unstable"
    if rate < -margin:
        return "stable"
    return "marginal"


def stability_table(law_plus, params, grid, jump=1.0, alpha_minus=2.0, nmax=2, margin=1e-6,
                    threads=1):
    """Linearised verdicts on the 3 x 3 grid of jump signs and surface tensions.

    Columns use jumps ``-jump, 0, +jump``.  Rows are ``sigma = 0`` and
    ``sigma_+ = sigma_- = s_ref / 2`` or ``2 s_ref`` with
    ``s_ref = jump g max(L1, L2)**2``, which equals ``sigma_c`` in the
    positive column.  A cell is ``unstable`` when ``max Re lambda`` over the
    nonzero lattice modes exceeds ``margin``, ``stable`` below ``-margin``
    and ``marginal`` otherwise; the zero-jump, zero-tension cell is expected
    to be marginal because the interface then carries no restoring force.
    """
    s_ref = abs(jump) * params.g * params.max_L_sq
    rows = {"zero": 0.0, "below": 0.5 * s_ref, "above": 2.0 * s_ref}
    modes = lattice_modes(params.L1, params.L2, nmax=nmax)
    jobs = []
    for sign in (-1, 0, 1):
        law_minus = lower_law_for_jump(law_plus, params, sign * jump, alpha_minus)
        for row, s in rows.items():
            jobs.append((sign, row, law_minus, s))

    def run(job):
        sign, row, law_minus, s = job
        p = params.replace(sigma_plus=s, sigma_minus=s)
        profile = build_equilibrium(law_plus, law_minus, p, 64)
        rate = max(growth_rate(assemble_mode_operator(xi, profile, p, grid)).re_lambda_max
                   for xi in modes)
        return TableCell(sign, row, float(profile.jump), s, s, float(rate),
                         _classify(rate, margin), _EXPECTED[(sign, row)])

    return parallel_map(run, jobs, threads)


# ---------------------------------------------------------------------------
# vanishing surface tension
# ---------------------------------------------------------------------------
@dataclass
class ConvergenceReport:
    """Terminal-state distances of the surface tension runs to the ``sigma = 0`` run."""

    sigmas: list
    distances: list
    monotone: bool
    order: Optional[float]
    complete: bool
    failures: dict = field(default_factory=dict)

    def to_dict(self):
        return {"sigmas": self.sigmas, "distances": self.distances, "monotone": self.monotone,
                "order": self.order, "complete": self.complete, "failures": self.failures}


def sigma_limit_experiment(base_config, sigma_sequence=None, threads=1, initial=None):
    """Run the simulation for each surface tension and for zero tension.

    All runs start from the same data, built consistently with the
    zero-tension boundary rows, so that only the tension differs.  The
    distance is the tier-0 norm of the difference of terminal states and the
    order ``p`` is the log-log slope of distance against ``sigma``.
    """
    from ..simulation import Simulator, state_distance
    from .runner import initial_state_for

    cfg = base_config
    sigmas = [float(s) for s in (sigma_sequence or cfg["sigma_limit"]["sigmas"])]
    if any(a <= b for a, b in zip(sigmas, sigmas[1:])) or any(s <= 0 for s in sigmas):
        raise ConfigError("sigma_limit.sigmas", "must be positive and strictly decreasing")
    params0 = cfg.params(sigma_plus=0.0, sigma_minus=0.0)
    profile = cfg.profile(params0)
    if not profile.jump < 0:
        raise ConfigError("law_minus", "the vanishing surface tension limit needs a negative jump")
    grid = cfg.grid()
    sim_cfg = cfg["simulation"]

    def make(p):
        return Simulator(profile, p, grid, sim_cfg["dt"], sim_cfg["scheme"],
                         mass_fix=sim_cfg["mass_fix"], remainder=sim_cfg["remainder"])

    sim0 = make(params0)
    state0 = initial if initial is not None else initial_state_for(sim0, cfg)

    def terminal(sig):
        sim = sim0 if sig == 0.0 else make(params0.replace(sigma_plus=sig, sigma_minus=sig))
        cur = state0
        try:
            for _ in range(sim_cfg["steps"]):
                cur = sim.step(cur)
        except (GeometryBreakdownError, NumericalError) as exc:
            return None, str(exc)
        return cur, None

    results = parallel_map(terminal, [0.0] + sigmas, threads)
    ref, ref_err = results[0]
    failures = {}
    if ref_err:
        failures["0"] = ref_err
    distances = []
    for sig, (st, err) in zip(sigmas, results[1:]):
        if err or ref is None:
            failures[format(sig, "g")] = err or "reference run failed"
            distances.append(float("nan"))
        else:
            distances.append(state_distance(st, ref))
    complete = not failures
    finite = [(s, d) for s, d in zip(sigmas, distances) if math.isfinite(d) and d > 0]
    order = None
    if len(finite) >= 2:
        xs = np.log([s for s, _ in finite])
        ys = np.log([d for _, d in finite])
        order = float(np.polyfit(xs, ys, 1)[0])
    monotone = complete and all(b < a for a, b in zip(distances, distances[1:]))
    return ConvergenceReport(sigmas, distances, monotone, order, complete, failures)
