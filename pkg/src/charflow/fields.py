"""Velocity fields with declared growth envelopes and continuity moduli.

A field is packaged with the analytic control data the diagnostics need: a
growth envelope G with ``|b(t,x)| <= C_G * G(|x|)``, a modulus of continuity
omega with ``|b(t,x)-b(t,y)| <= C * omega(|x-y|)`` inside declared radii, and
the list of points where the field is merely log-Lipschitz (used by the
integrator's freeze guard and the divergence stencil guard).

Every evaluator is pure and vectorized over a leading batch axis, so the flow
integrator can advance whole atom clouds per call.  The growth envelope is
re-checked at every sampled point; a violation is a hard error because all
downstream bounds silently depend on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.integrate

from .errors import EnvelopeViolation, FieldError, QuadratureError

_ENVELOPE_SLACK = 1e-9  # relative rounding allowance on the hard check


# -- smooth glue ----------------------------------------------------------

def smooth_step(u):
    """C-infinity monotone step: 0 for u <= 0, 1 for u >= 1."""
    u = np.asarray(u, dtype=float)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u > 0.0, np.exp(-1.0 / np.clip(u, 1e-300, None)), 0.0)
        b = np.where(u < 1.0, np.exp(-1.0 / np.clip(1.0 - u, 1e-300, None)), 0.0)
    out = a / (a + b)
    return float(out[0]) if scalar else out


def smooth_step_derivative(u):
    """Derivative of :func:`smooth_step`; vanishes to all orders at 0 and 1."""
    u = np.asarray(u, dtype=float)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    inside = (u > 0.0) & (u < 1.0)
    uu = np.clip(u, 1e-12, 1.0 - 1e-12)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.exp(-1.0 / uu)
        b = np.exp(-1.0 / (1.0 - uu))
        da = a / uu**2
        db = -b / (1.0 - uu)**2
        val = (da * b - a * db) / (a + b)**2
    out = np.where(inside, val, 0.0)
    return float(out[0]) if scalar else out


def plateau_bump(r, r_inner, r_outer):
    """Radial plateau: identically 1 for r <= r_inner, 0 for r >= r_outer."""
    return smooth_step((r_outer - np.asarray(r, dtype=float))
                       / (r_outer - r_inner))


def plateau_bump_derivative(r, r_inner, r_outer):
    width = r_outer - r_inner
    return -smooth_step_derivative((r_outer - np.asarray(r, dtype=float))
                                   / width) / width


# -- declared control data -------------------------------------------------

@dataclass(frozen=True)
class GrowthEnvelope:
    """Radial speed envelope G; ``divergent_tail`` asserts the integral of
    1/G over [r, infinity) diverges (no finite-time escape)."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    divergent_tail: bool
    name: str = ""

    def __call__(self, r):
        return self.evaluator(np.asarray(r, dtype=float))


@dataclass(frozen=True)
class Modulus:
    """Modulus of continuity; ``osgood`` asserts the integral of 1/omega
    over (0, r] diverges, the uniqueness-grade regularity class."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    osgood: bool
    closed_form_tag: Optional[str] = None

    def __call__(self, s):
        return self.evaluator(np.asarray(s, dtype=float))


def growth_constant(level=1.0):
    level = float(level)
    return GrowthEnvelope(lambda r: np.full_like(np.asarray(r, dtype=float),
                                                 level),
                          divergent_tail=True, name="constant")


def growth_affine():
    return GrowthEnvelope(lambda r: 1.0 + np.asarray(r, dtype=float),
                          divergent_tail=True, name="affine")


def _safe_positive(s):
    # clip away 0 before taking logs; the s factor restores the limit 0
    return np.clip(np.asarray(s, dtype=float), 1e-300, None)


def modulus_linear():
    return Modulus(lambda s: np.asarray(s, dtype=float), osgood=True,
                   closed_form_tag="linear")


def modulus_log():
    """omega(s) = s*log(e + 1/s): the log-Lipschitz scale."""
    def ev(s):
        s = np.asarray(s, dtype=float)
        return s * np.log(math.e + 1.0 / _safe_positive(s))
    return Modulus(ev, osgood=True, closed_form_tag="log")


def modulus_loglog():
    """omega(s) = s*L*log(e+L) with L = log(e + 1/s); still Osgood."""
    def ev(s):
        s = np.asarray(s, dtype=float)
        big_l = np.log(math.e + 1.0 / _safe_positive(s))
        return s * big_l * np.log(math.e + big_l)
    return Modulus(ev, osgood=True, closed_form_tag="loglog")


def modulus_loglog_squared():
    """omega(s) = s*L*log(e+L)^2; the integral of 1/omega converges, so the
    Osgood condition fails."""
    def ev(s):
        s = np.asarray(s, dtype=float)
        big_l = np.log(math.e + 1.0 / _safe_positive(s))
        return s * big_l * np.log(math.e + big_l)**2
    return Modulus(ev, osgood=False, closed_form_tag="loglog_squared")


@dataclass(frozen=True)
class VectorFieldSpec:
    """Evaluable velocity field plus its declared analytic control data.

    ``modulus_constants`` maps ball radii to constants valid for pairs inside
    that ball; lookups pick the smallest declared radius covering the request.
    ``math.inf`` declares a global constant.
    """

    dimension: int
    name: str
    evaluator: Callable[[float, np.ndarray], np.ndarray]  # (t, (N,n)) -> (N,n)
    growth: GrowthEnvelope
    modulus: Modulus
    growth_const: float
    modulus_constants: tuple  # ((radius, constant), ...) sorted by radius
    singular_points: tuple = ()
    lipschitz: bool = False
    time_dependent: bool = False

    def modulus_constant_for(self, radius):
        for declared_radius, const in self.modulus_constants:
            if declared_radius >= radius:
                return const
        raise FieldError(
            f"field '{self.name}' declares no modulus constant covering "
            f"radius {radius:g}")


def _declared(*pairs):
    return tuple(sorted(((float(r), float(c)) for r, c in pairs),
                        key=lambda rc: rc[0]))


def evaluate_batch(field, t, points):
    """Evaluate b(t, .) on an (N, n) batch with the hard envelope check."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != field.dimension:
        raise FieldError(
            f"expected points of shape (N, {field.dimension})")
    velocities = np.asarray(field.evaluator(float(t), points), dtype=float)
    if velocities.shape != points.shape:
        raise FieldError(
            f"field '{field.name}' returned shape {velocities.shape} "
            f"for input {points.shape}")
    if not np.all(np.isfinite(velocities)):
        bad = int(np.argmax(~np.all(np.isfinite(velocities), axis=1)))
        raise FieldError(
            f"field '{field.name}' returned a non-finite velocity at "
            f"{points[bad].tolist()} (t={t:g})")
    speeds = np.linalg.norm(velocities, axis=1)
    caps = field.growth_const * np.asarray(
        field.growth(np.linalg.norm(points, axis=1)), dtype=float)
    over = speeds > caps * (1.0 + _ENVELOPE_SLACK)
    if np.any(over):
        bad = int(np.argmax(over))
        raise EnvelopeViolation(
            f"field '{field.name}' broke its growth envelope at "
            f"{points[bad].tolist()}: speed {speeds[bad]:.6g} > "
            f"{caps[bad]:.6g}")
    return velocities


def evaluate(field, t, x):
    """Velocity at a single point; errors on non-finite output or an
    envelope violation."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return evaluate_batch(field, t, x.reshape(1, -1))[0]


def estimate_modulus_constant(field, radius, t_samples, pair_samples, seed=0):
    """Empirical sup of |b(t,x)-b(t,y)| / omega(|x-y|) inside B(0, radius).

    ``t_samples`` is either a sample count (grid on [0,1]) or an explicit
    sequence of times.  Pairs are drawn from a seeded stream, so enlarging
    ``pair_samples`` refines (never reshuffles) the sample set and the
    estimate is nondecreasing in the sample count.
    """
    if np.isscalar(t_samples):
        count = int(t_samples)
        if count < 1:
            raise FieldError("at least one time sample is required")
        times = np.linspace(0.0, 1.0, count) if count > 1 else np.array([0.0])
    else:
        times = np.asarray(t_samples, dtype=float)
    pair_samples = int(pair_samples)
    if pair_samples < 1:
        raise FieldError("at least one pair sample is required")
    rng = np.random.default_rng(seed)
    box = rng.uniform(-radius, radius,
                      size=(pair_samples, 2, field.dimension))
    inside = np.linalg.norm(box, axis=2) <= radius
    keep = inside[:, 0] & inside[:, 1]
    xs, ys = box[keep, 0, :], box[keep, 1, :]
    dists = np.linalg.norm(xs - ys, axis=1)
    nonzero = dists > 0.0
    xs, ys, dists = xs[nonzero], ys[nonzero], dists[nonzero]
    if len(dists) == 0:
        return 0.0
    denom = np.asarray(field.modulus(dists), dtype=float)
    if np.any(denom <= 0.0):
        raise FieldError("degenerate modulus: omega vanishes at a positive "
                         "separation")
    best = 0.0
    for t in times:
        gaps = np.linalg.norm(evaluate_batch(field, t, xs)
                              - evaluate_batch(field, t, ys), axis=1)
        best = max(best, float(np.max(gaps / denom)))
    return best


def divergence_numeric(field, t, x, h):
    """Central-difference divergence, second order in h.

    Refuses to difference across declared singular points closer than 2h.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = float(h)
    if h <= 0.0:
        raise FieldError("step h must be positive")
    for p in field.singular_points:
        if np.linalg.norm(x - np.asarray(p, dtype=float)) < 2.0 * h:
            raise FieldError(
                f"divergence stencil would straddle the singular point "
                f"{np.asarray(p).tolist()}; keep a distance of 2h")
    n = field.dimension
    stencil = np.repeat(x.reshape(1, -1), 2 * n, axis=0)
    for i in range(n):
        stencil[2 * i, i] += h
        stencil[2 * i + 1, i] -= h
    vel = evaluate_batch(field, t, stencil)
    terms = [(vel[2 * i, i] - vel[2 * i + 1, i]) / (2.0 * h)
             for i in range(n)]
    return math.fsum(terms)


def osgood_integral(mod, r_low, r_high):
    """Adaptive quadrature of the reciprocal modulus over [r_low, r_high].

    Diverges (in the limit r_low -> 0) exactly for Osgood moduli; the caller
    probes that by shrinking r_low.
    """
    r_low, r_high = float(r_low), float(r_high)
    if not 0.0 < r_low < r_high:
        raise FieldError("need 0 < r_low < r_high")

    def integrand(s):
        return 1.0 / float(mod(s))

    result = scipy.integrate.quad(integrand, r_low, r_high, limit=400,
                                  epsabs=1e-13, epsrel=1e-11, full_output=1)
    value = result[0]
    if len(result) > 3:  # QUADPACK warning message present
        raise QuadratureError(
            f"reciprocal-modulus quadrature did not converge: {result[3]}",
            partial=value)
    return value


# -- catalog ----------------------------------------------------------------

def constant_field(velocity):
    velocity = np.atleast_1d(np.asarray(velocity, dtype=float))
    n = len(velocity)
    speed = float(np.linalg.norm(velocity))

    def ev(t, pts):
        return np.broadcast_to(velocity, pts.shape).copy()

    return VectorFieldSpec(
        dimension=n, name="constant", evaluator=ev,
        growth=growth_constant(), modulus=modulus_linear(),
        growth_const=max(speed, 1.0),
        modulus_constants=_declared((math.inf, 0.0)),
        lipschitz=True)


def linear_field(matrix):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    n = matrix.shape[0]
    if matrix.shape != (n, n):
        raise FieldError("linear field needs a square matrix")
    norm = float(np.linalg.norm(matrix, 2))

    def ev(t, pts):
        return pts @ matrix.T

    return VectorFieldSpec(
        dimension=n, name="linear", evaluator=ev,
        growth=growth_affine(), modulus=modulus_linear(),
        growth_const=max(norm, 1e-12),
        modulus_constants=_declared((math.inf, max(norm, 1e-12))),
        lipschitz=True)


def rotation_field():
    """Planar rigid rotation (-y, x): divergence free, Lipschitz constant 1."""
    def ev(t, pts):
        return np.column_stack([-pts[:, 1], pts[:, 0]])

    return VectorFieldSpec(
        dimension=2, name="rotation", evaluator=ev,
        growth=growth_affine(), modulus=modulus_linear(),
        growth_const=1.0,
        modulus_constants=_declared((math.inf, 1.0)),
        lipschitz=True)


_MARGIN = 1e-3  # smooth matching width for the interval field


def osgood_1d_field(modulus_constant=3.0):
    """b(x) = -x log x on (0,1), ramped to 0 over margins of width 1e-3.

    The declared modulus is s*log(e + 1/s).  The default constant was fixed
    by dense-pair estimation over [-2, 2] (empirical sup ~ 1.9) and is
    re-verified by the test suite.
    """
    def ev(t, pts):
        x = pts[:, 0]
        inside = (x > 0.0) & (x < 1.0)
        xs = np.clip(x, 1e-300, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            core = np.where(inside, -xs * np.log(xs), 0.0)
        ramp = smooth_step(x / _MARGIN) * smooth_step((1.0 - x) / _MARGIN)
        return (core * ramp).reshape(-1, 1)

    return VectorFieldSpec(
        dimension=1, name="osgood1d", evaluator=ev,
        growth=growth_constant(), modulus=modulus_log(),
        growth_const=0.5,
        modulus_constants=_declared((math.inf, float(modulus_constant))))


# Radial truncation shared by the two plane examples: identically 1 on
# B(0, 1/4), vanishing outside B(0, 1/2).  Keeps the log(-log r^2) factors
# inside their domain r < 1.
_TRUNC_INNER = 0.25
_TRUNC_OUTER = 0.5


def _plane_example_evaluator(radial_factor, flip_y):
    def ev(t, pts):
        x, y = pts[:, 0], pts[:, 1]
        r2 = x * x + y * y
        live = (r2 > 0.0) & (r2 < _TRUNC_OUTER**2)
        r2s = np.where(live, r2, 0.01)
        factor = np.where(live, radial_factor(r2s), 0.0)
        factor = factor * plateau_bump(np.sqrt(r2), _TRUNC_INNER, _TRUNC_OUTER)
        vy = -y * factor if flip_y else y * factor
        return np.column_stack([x * factor, vy])
    return ev


def osgood_plane_field(modulus_constant=9.0):
    """Plane field (x*f, y*f) with f = log(r^2)*log(-log(r^2)), truncated
    outside radius 1/2.

    Not Lipschitz at the origin; its modulus s*L*log(e+L) is still Osgood,
    so trajectories through the origin remain unique.  The default constant
    is an empirical sup (~4.7 over the truncation disk) with headroom.
    """
    def f(r2):
        log_r2 = np.log(r2)
        return log_r2 * np.log(-log_r2)

    return VectorFieldSpec(
        dimension=2, name="osgood_plane", evaluator=_plane_example_evaluator(f, False),
        growth=growth_constant(), modulus=modulus_loglog(),
        growth_const=1.0,
        modulus_constants=_declared((math.inf, float(modulus_constant))),
        singular_points=(np.zeros(2),))


def nonosgood_plane_field(modulus_constant=11.0):
    """Plane field (x*g, -y*g) with g = log(r^2)*log(-log(r^2))^2, truncated
    outside radius 1/2.

    The squared outer log breaks the Osgood condition: 1/omega is integrable
    at 0 and uniqueness through the origin fails in the continuous problem.
    """
    def g(r2):
        log_r2 = np.log(r2)
        return log_r2 * np.log(-log_r2)**2

    return VectorFieldSpec(
        dimension=2, name="nonosgood_plane",
        evaluator=_plane_example_evaluator(g, True),
        growth=growth_constant(), modulus=modulus_loglog_squared(),
        growth_const=1.5,
        modulus_constants=_declared((math.inf, float(modulus_constant))),
        singular_points=(np.zeros(2),))


FIELD_CATALOG = {
    "constant": constant_field,
    "linear": linear_field,
    "rotation": rotation_field,
    "osgood1d": osgood_1d_field,
    "osgood_plane": osgood_plane_field,
    "nonosgood_plane": nonosgood_plane_field,
}
