"""Cutoffs, mollification, the three-term estimate, and the weak residual."""

import math

import numpy as np
import pytest

from charflow import (ConcaveCost, CutoffError, MollifierError, MollifierSpec,
                      ScheduleError, build_cutoff, build_mu_nu,
                      costestimate_bound, D_functional, GrowthEnvelope,
                      growth_affine, growth_constant, make_measure,
                      mass_balance, measure_from_arrays, modulus_linear,
                      modulus_log, modulus_loglog_squared, mollify,
                      parameter_schedule, rotation_field,
                      weak_solution_residual)
from charflow.diagnostics import DiagnosticsReport, build_cutoff as _bc  # noqa: F401
from charflow.diagnostics import trapezoid_rule


def saturation_linear(delta):
    """Closed-form J for the linear modulus with the quadratic tail."""
    rd = math.sqrt(delta)
    return (math.log((1.0 + delta) / delta)
            + (math.pi / 2.0 - math.atan(1.0 / rd)) / rd)


def test_trapezoid_is_exact_on_lines():
    assert trapezoid_rule([0.0, 1.0, 2.0], [0.0, 1.0, 2.0]) == 2.0
    assert trapezoid_rule([3.0, 3.0], [0.0, 0.25]) == 0.75


# -- cutoff ------------------------------------------------------------------

def test_cutoff_window_closed_forms():
    # affine growth: int_k^R ds/(1+s) = 1  =>  R = (1+k)e - 1
    cut = build_cutoff(growth_affine(), 1.0)
    assert cut.r_zero == pytest.approx(2.0 * math.e - 1.0, rel=1e-10)
    cut5 = build_cutoff(growth_affine(), 5.0)
    assert cut5.r_zero == pytest.approx(6.0 * math.e - 1.0, rel=1e-10)
    # constant growth: the window has width exactly 1
    flat = build_cutoff(growth_constant(), 2.0)
    assert flat.r_zero == pytest.approx(3.0, rel=1e-12)


def test_cutoff_plateau_support_and_gradient_cap():
    cut = build_cutoff(growth_affine(), 2.0)
    rs = np.linspace(0.0, cut.r_zero + 2.0, 1201)
    vals = cut.value(rs)
    assert np.all(vals[rs <= 2.0] == 1.0)
    assert np.all(vals[rs >= cut.r_zero] == 0.0)
    assert np.all(np.diff(vals) <= 1e-12)
    grads = cut.gradient_norm(rs)
    caps = 2.0 / (1.0 + rs)
    assert np.all(grads <= caps * (1.0 + 1e-9))
    assert cut.gradient_norm(1.0) == 0.0
    assert cut.gradient_norm(cut.r_zero + 0.5) == 0.0


def test_cutoff_apply_reweights_and_drops():
    cut = build_cutoff(growth_constant(), 1.0)  # window [1, 2]
    m = make_measure(2, [((0.5, 0.0), 0.4), ((1.5, 0.0), 0.4),
                         ((5.0, 0.0), 0.2)])
    out = cut.apply(m)
    assert out.atom_count == 2  # the far atom is gone
    inner = dict(zip(map(tuple, out.locations), out.weights))
    assert inner[(0.5, 0.0)] == 0.4  # plateau: weight untouched
    assert 0.0 < inner[(1.5, 0.0)] < 0.4


def test_cutoff_rejects_heavy_tails():
    heavy = GrowthEnvelope(lambda r: (1.0 + np.asarray(r, dtype=float))**2,
                           divergent_tail=False, name="quadratic")
    with pytest.raises(CutoffError, match="tail"):
        build_cutoff(heavy, 1.0)
    with pytest.raises(CutoffError):
        build_cutoff(growth_affine(), 0.0)


# -- mollifier ----------------------------------------------------------------

def test_mollifier_spec_guards():
    spec = MollifierSpec(alpha=0.25, dimension=2)
    assert spec.spacing == 0.0625
    with pytest.raises(MollifierError):
        MollifierSpec(alpha=1.0, dimension=2)
    with pytest.raises(MollifierError):
        MollifierSpec(alpha=0.0, dimension=2)
    with pytest.raises(MollifierError):
        MollifierSpec(alpha=0.25, dimension=0)
    with pytest.raises(MollifierError):
        MollifierSpec(alpha=0.25, dimension=1, cells_per_alpha=2)


def test_kernel_support_is_the_alpha_ball():
    spec = MollifierSpec(alpha=0.25, dimension=2)
    inside = spec.kernel(np.array([[0.0, 0.0], [0.1, 0.1]]))
    outside = spec.kernel(np.array([[0.25, 0.0], [0.3, 0.1]]))
    assert np.all(inside > 0.0)
    np.testing.assert_array_equal(outside, 0.0)


def test_mollify_conserves_mass_and_stays_local():
    rng = np.random.default_rng(11)
    m = measure_from_arrays(2, rng.uniform(-1, 1, size=(7, 2)),
                            rng.uniform(0.05, 0.3, size=7),
                            reservoir_weight=0.125)
    spec = MollifierSpec(alpha=0.2, dimension=2)
    out = mollify(m, spec)
    assert out.reservoir_weight == 0.125
    assert out.atom_count > m.atom_count
    assert out.total_mass() == pytest.approx(m.total_mass(), abs=1e-13)
    assert out.is_nonnegative()
    # every smoothed atom sits within alpha + one cell of a source atom
    from scipy.spatial.distance import cdist
    nearest = cdist(out.locations, m.locations).min(axis=1)
    assert np.max(nearest) <= spec.alpha + spec.spacing


def test_mollify_guards():
    spec = MollifierSpec(alpha=0.2, dimension=2)
    with pytest.raises(MollifierError):
        mollify(make_measure(1, [((0.0,), 1.0)]), spec)
    empty = make_measure(2, [], reservoir_weight=0.5)
    assert mollify(empty, spec) is empty


def test_build_mu_nu_balances_split_parts():
    diff = measure_from_arrays(2, [[0.1, 0.0], [0.4, 0.2]], [0.6, -0.6],
                               merge=False)
    cut = build_cutoff(growth_affine(), 4.0)  # both atoms deep inside
    pair = build_mu_nu(diff, cut, MollifierSpec(alpha=0.1, dimension=2))
    assert pair.mu.total_mass() == pair.nu.total_mass()
    assert pair.mu.total_mass() == pytest.approx(0.6, rel=1e-9)
    assert pair.mu.is_nonnegative() and pair.nu.is_nonnegative()


def test_d_functional_two_atoms():
    from charflow import balance_with_reservoir
    cost = ConcaveCost(modulus_linear(), 0.25, 2.0)
    mu = make_measure(1, [((0.0,), 0.5)])
    nu = make_measure(1, [((0.3,), 0.5)])
    pair = balance_with_reservoir(mu, nu)
    assert D_functional(pair, cost) == pytest.approx(0.5 * cost.cost(0.3),
                                                     rel=1e-11)


# -- the three-term estimate ---------------------------------------------------

def test_costestimate_closed_form():
    field = rotation_field()  # C = 1, C_G = 1, affine growth
    cut = build_cutoff(growth_affine(), 2.0)
    cost = ConcaveCost(modulus_linear(), 0.25, 2.0)
    m = make_measure(2, [((0.1, 0.0), 0.3)])
    est = costestimate_bound(field, [(0.0, m), (1.0, m)], cut, cost,
                             alpha=0.125)
    j = saturation_linear(0.25)
    assert est.term1 == pytest.approx(2.0 * 1.0 * 0.3, rel=1e-9)
    assert est.term2 == 0.0  # the atom sits inside radius k - 1
    rate = 2.0 / 0.25 + 2.0 * j / 3.0  # beta/delta + beta*J/G(2)
    assert est.term3 == pytest.approx(0.125 * rate * 0.3, rel=1e-9)
    assert est.bound == est.term1 + est.term2 + est.term3


def test_costestimate_sees_tail_mass():
    field = rotation_field()
    cut = build_cutoff(growth_affine(), 2.0)
    cost = ConcaveCost(modulus_linear(), 0.25, 2.0)
    far = make_measure(2, [((1.5, 0.0), 0.2)])  # beyond k - 1 = 1
    est = costestimate_bound(field, [(0.0, far), (1.0, far)], cut, cost,
                             alpha=0.125)
    j = saturation_linear(0.25)
    assert est.term2 == pytest.approx(2.0 * 2.0 * 1.0 * j * 0.2, rel=1e-9)


def test_costestimate_needs_a_time_grid():
    field = rotation_field()
    cut = build_cutoff(growth_affine(), 2.0)
    cost = ConcaveCost(modulus_linear(), 0.25, 2.0)
    m = make_measure(2, [((0.1, 0.0), 0.3)])
    with pytest.raises(ScheduleError):
        costestimate_bound(field, [(0.0, m)], cut, cost, alpha=0.125)
    with pytest.raises(ScheduleError):
        costestimate_bound(field, [(1.0, m), (0.0, m)], cut, cost,
                           alpha=0.125)


# -- the parameter schedule ----------------------------------------------------

def test_schedule_formulas_for_the_linear_modulus():
    sched = parameter_schedule(k=2.0, variation_integral=1.75,
                               variation_floor=0.5, modulus_constant=1.0,
                               growth_constant=1.0, modulus=modulus_linear(),
                               growth_at_k=3.0)
    assert sched.beta == 1.0 / 2.75
    assert sched.j_target == 2.75 / (2.0 * 2.0 * 0.5)
    assert saturation_linear(sched.delta) == pytest.approx(sched.j_target,
                                                           rel=1e-8)
    # alpha is the largest dyadic meeting the third-term cap
    j = saturation_linear(sched.delta)
    rate = (sched.beta / sched.delta + sched.beta * j / 3.0) * 2.75
    assert sched.alpha * rate <= 1.0  # omega(alpha) = alpha here
    assert math.log2(sched.alpha) == int(math.log2(sched.alpha))
    if sched.alpha < 1.0:
        assert 2.0 * sched.alpha * rate > 1.0


@pytest.mark.parametrize("seed", range(6))
def test_schedule_caps_every_term(seed):
    rng = np.random.default_rng(seed)
    k = float(rng.integers(1, 6))
    ivar = float(rng.uniform(0.1, 4.0))
    floor = float(rng.uniform(1.0 / (k + 1.0), max(ivar, 1.0 / k)))
    const = float(rng.uniform(0.5, 4.0))
    growth_const = float(rng.uniform(0.5, 3.0))
    sched = parameter_schedule(k, ivar, floor, const, growth_const,
                               modulus_log(), growth_at_k=1.0 + k)
    from charflow import saturation_integral
    j = saturation_integral(modulus_log(), sched.delta)
    term1_cap = sched.beta * const * ivar
    term2_cap = 2.0 * sched.beta * growth_const * j * floor
    term3_cap = (const * float(modulus_log()(sched.alpha))
                 * (sched.beta / sched.delta
                    + sched.beta * j / (1.0 + k)) * ivar)
    assert term1_cap < 1.0
    assert term2_cap <= 1.0 + 1e-9
    assert term3_cap <= 1.0 + 1e-9


def test_schedule_fails_honestly_outside_the_osgood_class():
    # J is bounded for this modulus, so a large target is unreachable
    with pytest.raises(ScheduleError, match="converges"):
        parameter_schedule(k=50.0, variation_integral=1.0,
                           variation_floor=0.02, modulus_constant=1.0,
                           growth_constant=1.0,
                           modulus=modulus_loglog_squared())


def test_schedule_argument_guards():
    with pytest.raises(ScheduleError):
        parameter_schedule(1.0, -0.5, 0.5, 1.0, 1.0, modulus_linear())
    with pytest.raises(ScheduleError):
        parameter_schedule(1.0, 0.5, 0.0, 1.0, 1.0, modulus_linear())


def test_mass_balance_is_exact():
    m = measure_from_arrays(1, [[0.0], [1.0], [2.0]], [0.5, -0.25, -0.25],
                            merge=False)
    assert mass_balance(m) == 0.0
    assert mass_balance(m.with_reservoir(0.125)) == 0.125


# -- weak residual --------------------------------------------------------------

def _rotation_snapshots(n_times, seed=3):
    rng = np.random.default_rng(seed)
    pts0 = rng.uniform(-0.5, 0.5, size=(6, 2))
    w = rng.uniform(0.1, 0.3, size=6)
    out = []
    for t in np.linspace(0.0, 1.0, n_times):
        c, s = math.cos(t), math.sin(t)
        rot = np.array([[c, -s], [s, c]])
        out.append((float(t), measure_from_arrays(2, pts0 @ rot.T, w)))
    return out


def test_weak_residual_vanishes_with_the_grid():
    field = rotation_field()
    coarse = weak_solution_residual(field, _rotation_snapshots(21))
    fine = weak_solution_residual(field, _rotation_snapshots(41))
    assert coarse < 5e-3
    assert coarse / fine > 3.9  # trapezoid: halving the step quarters it


def test_weak_residual_flags_a_wrong_evolution():
    field = rotation_field()
    rng = np.random.default_rng(3)
    pts0 = rng.uniform(-0.5, 0.5, size=(6, 2))
    w = rng.uniform(0.1, 0.3, size=6)
    frozen = [(float(t), measure_from_arrays(2, pts0, w))
              for t in np.linspace(0.0, 1.0, 21)]
    assert weak_solution_residual(field, frozen) > 0.05


def test_weak_residual_needs_two_snapshots():
    with pytest.raises(ScheduleError):
        weak_solution_residual(rotation_field(), _rotation_snapshots(21)[:1])


# -- report ---------------------------------------------------------------------

def test_report_roundtrip_and_width_guard(tmp_path):
    rows = [(0.0, 0.1, 0.01, 0.0, 0.02, 0.03, 0.5, 0.0),
            (0.5, 0.2, 0.015, 0.001, 0.025, 0.0415, 0.6, 0.0)]
    report = DiagnosticsReport.from_rows(rows)
    path = tmp_path / "report.csv"
    report.to_csv(path)
    text = path.read_text().splitlines()
    assert text[0] == "t,D,term1,term2,term3,bound,W_refine,mass"
    parsed = [tuple(float(c) for c in line.split(",")) for line in text[1:]]
    assert parsed == [tuple(map(float, r)) for r in rows]
    report.to_csv(path)
    assert path.read_text().splitlines() == text  # deterministic rewrite
    bad = DiagnosticsReport(rows=((0.0, 1.0),))
    with pytest.raises(ScheduleError):
        bad.to_csv(tmp_path / "bad.csv")
