"""Uniqueness diagnostics: cutoffs, mollification, and the transport bound.

The pipeline takes the signed difference of two candidate solutions,
localizes it with a growth-adapted cutoff, mollifies it onto a lattice,
splits it into positive and negative parts balanced through the absorbing
point, and measures the result with the concave-cost transport functional.
The same module computes the three-term upper bound for the growth of that
functional and the parameter schedule that keeps each term below one, which
is the quantitative heart of the uniqueness argument.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.integrate
import scipy.optimize

from .costs import saturation_integral
from .errors import CutoffError, MollifierError, ScheduleError
from .fields import evaluate_batch, smooth_step, smooth_step_derivative
from .fileio import atomic_write_text
from .measures import balance_with_reservoir, jordan_decompose, \
    measure_from_arrays
from .transport import solve_ot

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)
_RK_CAP = 1e9


def trapezoid_rule(values, times):
    """Plain trapezoid quadrature over an increasing grid."""
    values = np.asarray(values, dtype=float)
    times = np.asarray(times, dtype=float)
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(times)))


# -- growth-adapted cutoff ---------------------------------------------------

@dataclass(frozen=True)
class CutoffFamily:
    """Radial cutoff for level k: identically 1 on B(0, k), 0 outside
    B(0, r_zero), with |gradient| <= 2 / G(r) pointwise.

    The profile is a smooth step applied to H(r) = int_k^r ds/G(s); r_zero
    is where H reaches 1, so the decay happens exactly over the window the
    growth envelope allows, and |chi'| = S'(1 - H)/G <= 2/G because the
    step's slope never exceeds 2.
    """

    k: float
    r_zero: float
    sigma: float
    growth: object
    _h_knots: np.ndarray
    _h_values: np.ndarray

    def _h(self, r):
        """H(r) = int_k^r ds / G(s) on [k, r_zero], from the cumulative
        table plus a short quadrature residual."""
        r = np.asarray(r, dtype=float)
        idx = np.searchsorted(self._h_knots, r, side="right") - 1
        idx = np.clip(idx, 0, len(self._h_knots) - 2)
        base_r = self._h_knots[idx]
        base_v = self._h_values[idx]
        half = 0.5 * (r - base_r)
        mid = 0.5 * (r + base_r)
        nodes = mid[..., None] + half[..., None] * _GL_NODES
        dens = 1.0 / np.asarray(self.growth(nodes.ravel()),
                                dtype=float).reshape(nodes.shape)
        return base_v + (dens * _GL_WEIGHTS).sum(axis=-1) * half

    def value(self, r):
        r = np.asarray(r, dtype=float)
        scalar = r.ndim == 0
        r = np.atleast_1d(r)
        out = np.ones_like(r)
        out[r >= self.r_zero] = 0.0
        mid = (r > self.k) & (r < self.r_zero)
        if mid.any():
            out[mid] = smooth_step(1.0 - self._h(r[mid]))
        return float(out[0]) if scalar else out

    def gradient_norm(self, r):
        """|d chi / d r|; the full gradient is this times the unit radial
        direction."""
        r = np.asarray(r, dtype=float)
        scalar = r.ndim == 0
        r = np.atleast_1d(r)
        out = np.zeros_like(r)
        mid = (r > self.k) & (r < self.r_zero)
        if mid.any():
            slope = smooth_step_derivative(1.0 - self._h(r[mid]))
            out[mid] = slope / np.asarray(self.growth(r[mid]), dtype=float)
        return float(out[0]) if scalar else out

    def apply(self, measure):
        """Reweight an atomic measure by the cutoff (drops far atoms)."""
        radii = np.linalg.norm(measure.locations, axis=1) \
            if measure.atom_count else np.zeros(0)
        return measure.scaled_weights(self.value(radii))


def build_cutoff(growth, k, check_samples=512):
    """Construct the level-k cutoff for a growth envelope.

    Fails when the envelope grows so fast that int_k^R ds/G cannot reach 1
    for any representable radius (the decay window would be infinite).
    """
    k = float(k)
    if k <= 0.0:
        raise CutoffError("cutoff level k must be positive")

    def h_to(r):
        with warnings.catch_warnings():
            # probing a heavy tail legitimately stalls the quadrature; the
            # bracket search below turns that into a CutoffError
            warnings.simplefilter("ignore", scipy.integrate.IntegrationWarning)
            val, _ = scipy.integrate.quad(
                lambda s: 1.0 / float(growth(s)), k, r,
                limit=200, epsabs=1e-14, epsrel=1e-12)
        return val

    hi = k + 1.0
    while h_to(hi) < 1.0:
        hi *= 2.0
        if hi > _RK_CAP:
            raise CutoffError("G tail too heavy for numeric R_k")
    r_zero = scipy.optimize.brentq(lambda r: h_to(r) - 1.0, k, hi,
                                   xtol=1e-13, rtol=1e-15)
    sigma = min(0.5, (r_zero - k) / 8.0)

    knots = np.linspace(k, r_zero, 2049)
    lo, hi_k = knots[:-1], knots[1:]
    half = 0.5 * (hi_k - lo)
    mid = 0.5 * (hi_k + lo)
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    dens = 1.0 / np.asarray(growth(nodes.ravel()),
                            dtype=float).reshape(nodes.shape)
    incs = (dens * _GL_WEIGHTS[None, :]).sum(axis=1) * half
    values = np.concatenate([[0.0], np.cumsum(incs)])

    cut = CutoffFamily(k=k, r_zero=float(r_zero), sigma=float(sigma),
                       growth=growth, _h_knots=knots, _h_values=values)

    # invariant audit on a dense sample
    rs = np.linspace(max(k - 1.0, 0.0), r_zero + 1.0, check_samples)
    vals = cut.value(rs)
    if np.any(vals < 0.0) or np.any(vals > 1.0):
        raise CutoffError("cutoff left the unit interval")
    if np.any(vals[rs <= k] != 1.0) or np.any(vals[rs >= r_zero] != 0.0):
        raise CutoffError("cutoff plateau or support is wrong")
    if np.any(np.diff(vals) > 1e-12):
        raise CutoffError("cutoff is not nonincreasing")
    grads = cut.gradient_norm(rs)
    caps = 2.0 / np.asarray(growth(rs), dtype=float)
    if np.any(grads > caps * (1.0 + 1e-9)):
        raise CutoffError("cutoff gradient exceeded 2/G")
    return cut


# -- mollification -------------------------------------------------------------

@dataclass(frozen=True)
class MollifierSpec:
    """Compactly supported bump kernel of radius alpha on a lattice of
    spacing alpha / cells_per_alpha."""

    alpha: float
    dimension: int
    cells_per_alpha: int = 4

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise MollifierError("alpha must lie in (0, 1)")
        if self.dimension < 1:
            raise MollifierError("dimension must be at least 1")
        if self.cells_per_alpha < 4:
            raise MollifierError(
                "lattice cells must be at most alpha/4 wide")
        # continuous unit-mass audit: compare the closed normalization
        # against an independent radial quadrature
        n = self.dimension
        surface = 2.0 * math.pi**(n / 2.0) / math.gamma(n / 2.0)
        target, _ = scipy.integrate.quad(
            lambda r: math.exp(-1.0 / (1.0 - r * r)) * r**(n - 1),
            0.0, 1.0, limit=200, epsabs=1e-14, epsrel=1e-13)
        xs = np.linspace(0.0, 1.0, 20001)[:-1] + 0.5 / 20000
        riemann = float(np.sum(np.exp(-1.0 / (1.0 - xs * xs))
                               * xs**(n - 1)) / 20000)
        if abs(target - riemann) > 1e-10 * max(target, 1.0):
            raise MollifierError("kernel mass normalization disagrees")
        object.__setattr__(self, "_radial_mass", target * surface)

    @property
    def spacing(self):
        return self.alpha / self.cells_per_alpha

    def kernel(self, offsets):
        """Unnormalized bump exp(-1/(1-|x/alpha|^2)) on |x| < alpha."""
        offsets = np.asarray(offsets, dtype=float)
        q = np.sum((offsets / self.alpha)**2, axis=-1)
        out = np.zeros(q.shape)
        inside = q < 1.0
        out[inside] = np.exp(-1.0 / (1.0 - q[inside]))
        return out


def mollify(measure, spec):
    """Smooth an atomic measure onto the mollifier's lattice.

    Each atom's weight is distributed over the lattice cells its kernel
    touches, normalized by the kernel's own lattice sum, so the atom's mass
    is conserved exactly up to one rounding per cell.  The lattice is
    anchored at the origin, so overlapping kernels accumulate into shared
    cells instead of multiplying atoms.
    """
    if measure.dimension != spec.dimension:
        raise MollifierError("measure and mollifier dimensions differ")
    if measure.atom_count == 0:
        return measure
    h = spec.spacing
    n = spec.dimension
    reach = int(math.ceil(spec.alpha / h)) + 1
    offsets = np.stack(np.meshgrid(
        *([np.arange(-reach, reach + 1)] * n), indexing="ij"),
        axis=-1).reshape(-1, n)

    cells = {}
    for loc, w in zip(measure.locations, measure.weights):
        base = np.floor(loc / h - 0.5).astype(int)
        idx = base[None, :] + offsets
        centers = (idx + 0.5) * h
        weights = spec.kernel(centers - loc[None, :])
        total = weights.sum()
        if total <= 0.0:
            raise MollifierError(
                f"kernel missed every lattice cell near {loc.tolist()}")
        share = w * (weights / total)
        for cell, q in zip(map(tuple, idx), share):
            if q != 0.0:
                cells[cell] = cells.get(cell, 0.0) + q

    items = sorted(cells.items())
    locations = np.array([(np.array(cell) + 0.5) * h
                          for cell, _ in items], dtype=float)
    weights = np.array([q for _, q in items], dtype=float)
    keep = weights != 0.0
    return measure_from_arrays(n, locations[keep], weights[keep],
                               reservoir_weight=measure.reservoir_weight,
                               merge=False)


# -- the transport functional and its bound ------------------------------------

def build_mu_nu(difference, cutoff, mollifier):
    """Localize, smooth, and split a signed difference into a balanced pair.

    Order matters: mollify first (the lattice sees the raw atoms), then
    weight by the cutoff, then take positive and negative parts; whichever
    side is lighter is topped up through the absorbing point.
    """
    smooth = mollify(difference, mollifier)
    localized = cutoff.apply(smooth)
    mu_raw, nu_raw = jordan_decompose(localized)
    return balance_with_reservoir(mu_raw, nu_raw)


def D_functional(pair, cost):
    """Transport value of a balanced pair under a concave cost."""
    plan, _ = solve_ot(pair, cost)
    return plan.primal_value


@dataclass(frozen=True)
class CostEstimate:
    """Three-term bound for the time derivative of the transport value."""

    term1: float
    term2: float
    term3: float

    @property
    def bound(self):
        return self.term1 + self.term2 + self.term3


def costestimate_bound(field, snapshots, cutoff, cost, alpha):
    """Evaluate the three-term estimate along difference snapshots.

    * term1: modulus term, beta * C * integral of total variation;
    * term2: boundary leakage through the cutoff's decay window,
      2 * beta * C_G * J * integral of the variation beyond radius k - 1;
    * term3: mollification error, C * omega(alpha) * (beta/delta +
      beta * J / G(k)) * integral of total variation;

    J is the saturating integral of the reciprocal modified modulus.  Time
    integrals use the trapezoid rule on the given snapshot grid.
    """
    snapshots = list(snapshots)
    if len(snapshots) < 2:
        raise ScheduleError("need at least two snapshots in time")
    times = np.array([t for t, _ in snapshots], dtype=float)
    if np.any(np.diff(times) <= 0.0):
        raise ScheduleError("snapshot times must increase")

    totals = []
    outside = []
    for _, m in snapshots:
        totals.append(m.total_variation())
        if m.atom_count:
            radii = np.linalg.norm(m.locations, axis=1)
            far = np.abs(m.weights[radii >= cutoff.k - 1.0])
            outside.append(math.fsum(far) + abs(m.reservoir_weight))
        else:
            outside.append(abs(m.reservoir_weight))
    int_total = trapezoid_rule(totals, times)
    int_out = trapezoid_rule(outside, times)

    const = field.modulus_constant_for(cutoff.r_zero + 1.0)
    beta, delta = cost.beta, cost.delta
    j_val = saturation_integral(field.modulus, delta)
    g_at_k = float(field.growth(cutoff.k))
    omega_alpha = float(field.modulus(alpha))

    term1 = beta * const * int_total
    term2 = 2.0 * beta * field.growth_const * j_val * int_out
    term3 = (const * omega_alpha
             * (beta / delta + beta * j_val / g_at_k) * int_total)
    return CostEstimate(term1=term1, term2=term2, term3=term3)


@dataclass(frozen=True)
class Schedule:
    """Per-level parameters: cost shape (beta, delta), mollifier radius
    alpha, and the intermediate quantities that justify them."""

    k: float
    variation_integral: float
    variation_floor: float
    beta: float
    delta: float
    alpha: float
    j_target: float


def parameter_schedule(k, variation_integral, variation_floor,
                       modulus_constant, growth_constant, modulus,
                       growth_at_k=1.0):
    """Choose beta, delta, alpha at level k so each bound term stays small.

    With I the time-integrated total variation and I_k its tail counterpart
    floored at 1/k (the caller applies the floor):

    * beta = 1 / (C * I + 1) caps term1 at C*I/(C*I+1) < 1;
    * delta solves J(delta) = (C * I + 1) / (2 * (C_G + 1) * I_k), which
      caps term2 once the tail variation is below I_k;
    * alpha is the largest power of 1/2 with
      omega(alpha) * (beta/delta + beta*J/G(k)) * (C*I + 1) <= 1, capping
      term3.  Any smaller alpha keeps the inequality.

    Fails honestly when no delta reaches the target (the reciprocal modulus
    integral converges: the non-uniqueness regime) or when alpha underflows.
    """
    ivar = float(variation_integral)
    floor = float(variation_floor)
    if ivar < 0.0 or floor <= 0.0:
        raise ScheduleError("variation integrals must be nonnegative "
                            "(tail floored away from zero)")
    const = float(modulus_constant)
    beta = 1.0 / (const * ivar + 1.0)
    j_target = (const * ivar + 1.0) / (2.0 * (float(growth_constant) + 1.0)
                                       * floor)

    lo = 1.0
    while saturation_integral(modulus, lo) < j_target:
        lo *= 0.1
        if lo < 1e-280:
            raise ScheduleError(
                "no delta reaches the target saturation scale; the "
                "reciprocal modulus integral converges")
    hi = lo
    while saturation_integral(modulus, hi) > j_target:
        hi *= 10.0
        if hi > 1e12:
            raise ScheduleError("delta search bracket ran away upward")
    if hi == lo:
        delta = lo
    else:
        log_delta = scipy.optimize.brentq(
            lambda ld: saturation_integral(modulus, math.exp(ld)) - j_target,
            math.log(lo), math.log(hi), xtol=1e-12, rtol=8.9e-16)
        delta = math.exp(log_delta)

    j_val = saturation_integral(modulus, delta)
    rate = (beta / delta + beta * j_val / float(growth_at_k)) \
        * (const * ivar + 1.0)
    alpha = 1.0
    for _ in range(1080):
        if float(modulus(alpha)) * rate <= 1.0:
            break
        alpha *= 0.5
        if alpha == 0.0:
            break
    else:
        alpha = 0.0
    if alpha == 0.0 or float(modulus(alpha)) * rate > 1.0:
        raise ScheduleError(
            "mollifier radius underflowed before meeting the bound")
    return Schedule(k=float(k), variation_integral=ivar,
                    variation_floor=floor, beta=beta, delta=delta,
                    alpha=alpha, j_target=j_target)


def mass_balance(measure):
    """Signed total including the reservoir; exact fsum."""
    terms = list(measure.weights) + [measure.reservoir_weight]
    return math.fsum(terms)


# -- weak-formulation residual --------------------------------------------------

def _test_bank(radius, horizon):
    """Deterministic library of separable space-time test functions.

    Each entry is (psi, dpsi, g, grad_g) with psi vanishing at the horizon
    and g a compactly supported plateau, optionally modulated by low-order
    polynomials so the residual probes transport, not just mass.
    """
    T = float(horizon)
    r_in = 0.6 * radius
    r_out = 1.2 * radius + 1e-6

    def psi_poly(t):
        return (1.0 - (t / T)**2)**2

    def dpsi_poly(t):
        return -4.0 * (t / T**2) * (1.0 - (t / T)**2)

    def psi_cos(t):
        return math.cos(math.pi * t / (2.0 * T))

    def dpsi_cos(t):
        return -math.pi / (2.0 * T) * math.sin(math.pi * t / (2.0 * T))

    def plateau(points):
        r = np.linalg.norm(points, axis=1)
        return smooth_step((r_out - r) / (r_out - r_in))

    def plateau_grad(points):
        r = np.linalg.norm(points, axis=1)
        slope = -smooth_step_derivative((r_out - r) / (r_out - r_in)) \
            / (r_out - r_in)
        safe = np.where(r > 0.0, r, 1.0)
        return slope[:, None] * points / safe[:, None]

    def g_plain(points):
        return plateau(points)

    def grad_plain(points):
        return plateau_grad(points)

    def g_coord(points):
        return points[:, 0] * plateau(points)

    def grad_coord(points):
        grad = points[:, 0:1] * plateau_grad(points)
        grad[:, 0] += plateau(points)
        return grad

    def g_quad(points):
        return np.sum(points**2, axis=1) * plateau(points)

    def grad_quad(points):
        return (np.sum(points**2, axis=1)[:, None] * plateau_grad(points)
                + 2.0 * points * plateau(points)[:, None])

    bank = []
    for psi, dpsi in ((psi_poly, dpsi_poly), (psi_cos, dpsi_cos)):
        for g, grad in ((g_plain, grad_plain), (g_coord, grad_coord),
                        (g_quad, grad_quad)):
            bank.append((psi, dpsi, g, grad))
    return bank


def weak_solution_residual(field, snapshots, test_bank=None):
    """Residual of the continuity equation in weak form along snapshots.

    For each test function psi(t) * g(x) with psi(T) = 0 the exact solution
    satisfies

        int_0^T sum_atoms w [psi' g + psi <b, grad g>] dt
            + psi(0) * sum_atoms w0 g = 0;

    the time integral is trapezoidal on the snapshot grid.  Returns the
    maximum absolute residual over the bank.
    """
    snapshots = list(snapshots)
    if len(snapshots) < 2:
        raise ScheduleError("need at least two snapshots in time")
    times = np.array([t for t, _ in snapshots], dtype=float)
    horizon = times[-1]
    radius = 1.0
    for _, m in snapshots:
        if m.atom_count:
            radius = max(radius, float(np.max(
                np.linalg.norm(m.locations, axis=1))))
    bank = test_bank or _test_bank(radius, horizon)

    worst = 0.0
    for psi, dpsi, g, grad in bank:
        integrand = []
        for t, m in snapshots:
            if m.atom_count == 0:
                integrand.append(0.0)
                continue
            gv = g(m.locations)
            gr = grad(m.locations)
            vel = evaluate_batch(field, t, m.locations)
            advect = np.sum(gr * vel, axis=1)
            integrand.append(math.fsum(
                w * (dpsi(t) * gv_i + psi(t) * adv_i)
                for w, gv_i, adv_i in zip(m.weights, gv, advect)))
        time_part = trapezoid_rule(integrand, times)
        t0, m0 = snapshots[0]
        initial = psi(t0) * math.fsum(
            w * gv for w, gv in zip(m0.weights, g(m0.locations))) \
            if m0.atom_count else 0.0
        worst = max(worst, abs(time_part + initial))
    return worst


# -- reporting -------------------------------------------------------------------

_REPORT_COLUMNS = ("t", "D", "term1", "term2", "term3", "bound",
                   "W_refine", "mass")


@dataclass(frozen=True)
class DiagnosticsReport:
    """Per-time rows of the functional, its bound terms, the benchmark
    refinement distance, and the signed mass balance."""

    rows: tuple

    def to_csv(self, path):
        lines = [",".join(_REPORT_COLUMNS)]
        for row in self.rows:
            if len(row) != len(_REPORT_COLUMNS):
                raise ScheduleError("report row has the wrong width")
            lines.append(",".join(repr(float(x)) for x in row))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @staticmethod
    def from_rows(rows):
        return DiagnosticsReport(rows=tuple(tuple(map(float, r))
                                            for r in rows))
