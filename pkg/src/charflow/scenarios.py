"""Scenario configs, end-to-end runs, and the refinement study.

A scenario bundles a catalog velocity field, an initial density, a time
horizon, and diagnostics settings.  :func:`run_scenario` pushes two
discretizations of the same datum through the characteristic flow, measures
their difference at the report times, and checks the contraction machinery
at each cutoff level.  :func:`convergence_study` quantizes one datum on a
ladder of resolutions and tracks the flat transport distance between
consecutive rungs.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .costs import ConcaveCost, saturation_integral
from .diagnostics import (CostEstimate, DiagnosticsReport, MollifierSpec,
                          Schedule, build_cutoff, build_mu_nu,
                          costestimate_bound, D_functional, mass_balance,
                          mollify, parameter_schedule, trapezoid_rule,
                          weak_solution_residual)
from .errors import CharflowError, ConfigError
from .fields import (FIELD_CATALOG, growth_affine, modulus_linear,
                     rotation_field)
from .fileio import atomic_write_text
from .flow import FlowOptions, flow_map, integrate_flow
from .measures import (balance_with_reservoir, jordan_decompose,
                       make_measure, measure_from_arrays)
from .transport import brute_force_ot, comparison_bound, reference_W, solve_ot

_ATOM_BUDGET = 20000
_SNAP_GRAIN = 2.0 ** -40
_BOUND_SLACK = 1e-5   # relative slack for D <= bound checks
_TERM_SLACK = 1e-9    # absolute slack for the unit bound on schedule terms


# -- densities ----------------------------------------------------------------


@dataclass(frozen=True)
class DensityField:
    """Unnormalized density on an axis-aligned box, with a known sup."""

    dimension: int
    box_low: np.ndarray
    box_high: np.ndarray
    pdf: object
    pdf_sup: float


def _require(params, allowed, kind):
    extra = set(params) - set(allowed)
    if extra:
        raise ConfigError(
            f"unknown {kind} parameter(s): {', '.join(sorted(extra))}")


def _gaussian_density(params):
    _require(params, ("kind", "center", "spread"), "gaussian density")
    center = np.asarray(params.get("center", (0.0, 0.0)), dtype=float)
    if center.ndim != 1 or center.size == 0:
        raise ConfigError("gaussian center must be a coordinate list")
    spread = float(params.get("spread", 0.15))
    if not spread > 0.0:
        raise ConfigError("gaussian spread must be positive")

    def pdf(points):
        q = np.sum((points - center) ** 2, axis=1)
        return np.exp(-q / (2.0 * spread * spread))

    return DensityField(len(center), center - 4.0 * spread,
                        center + 4.0 * spread, pdf, 1.0)


def _ring_density(params):
    _require(params, ("kind", "radius", "width"), "ring density")
    radius = float(params.get("radius", 0.5))
    width = float(params.get("width", 0.06))
    if not (radius > 0.0 and width > 0.0):
        raise ConfigError("ring radius and width must be positive")
    reach = radius + 4.0 * width

    def pdf(points):
        r = np.linalg.norm(points, axis=1)
        return np.exp(-((r - radius) ** 2) / (2.0 * width * width))

    return DensityField(2, np.array([-reach, -reach]),
                        np.array([reach, reach]), pdf, 1.0)


def _interval_density(params):
    _require(params, ("kind", "low", "high"), "interval density")
    low = float(params.get("low", 0.0))
    high = float(params.get("high", 1.0))
    if not high > low:
        raise ConfigError("interval density needs low < high")

    def pdf(points):
        return np.ones(len(points))

    return DensityField(1, np.array([low]), np.array([high]), pdf, 1.0)


def _two_bumps_density(params):
    _require(params, ("kind", "centers", "spread"), "two_bumps density")
    centers = np.asarray(params.get("centers", ((-0.4,), (0.4,))), dtype=float)
    if centers.ndim != 2 or centers.shape[0] != 2:
        raise ConfigError("two_bumps needs exactly two center coordinates")
    spread = float(params.get("spread", 0.1))
    if not spread > 0.0:
        raise ConfigError("two_bumps spread must be positive")

    def pdf(points):
        out = np.zeros(len(points))
        for c in centers:
            out += np.exp(-np.sum((points - c) ** 2, axis=1)
                          / (2.0 * spread * spread))
        return out

    low = centers.min(axis=0) - 4.0 * spread
    high = centers.max(axis=0) + 4.0 * spread
    return DensityField(centers.shape[1], low, high, pdf, 2.0)


_DENSITY_BUILDERS = {
    "gaussian": _gaussian_density,
    "ring": _ring_density,
    "interval": _interval_density,
    "two_bumps": _two_bumps_density,
}


def density_from_config(doc):
    """Build the density named by a config block (kind plus parameters)."""
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError("density block needs a \"kind\" key")
    kind = doc["kind"]
    if kind == "atoms":
        raise ConfigError("explicit atoms carry no density to sample")
    if kind not in _DENSITY_BUILDERS:
        known = ", ".join(sorted([*_DENSITY_BUILDERS, "atoms"]))
        raise ConfigError(f"unknown density kind {kind!r} (known: {known})")
    return _DENSITY_BUILDERS[kind](doc)


# -- quantization --------------------------------------------------------------


def _snap_unit_weights(weights):
    """Round positive weights onto the dyadic grain 2**-40 of total mass 1.

    Every snapped weight is an integer multiple of the grain and the
    multiplicities stay far below 2**53, so partial sums are exact and
    math.fsum of the result is exactly 1.0 in any order.
    """
    weights = np.asarray(weights, dtype=float)
    total = math.fsum(weights)
    if not total > 0.0:
        raise ConfigError("density sampled to zero mass")
    counts = np.round(weights / total / _SNAP_GRAIN)
    keep = counts > 0.0
    if not keep.any():
        raise ConfigError("quantization rounded every atom away")
    kept = counts[keep]
    shortfall = round(1.0 / _SNAP_GRAIN) - round(math.fsum(kept))
    kept[int(np.argmax(kept))] += shortfall
    if kept[int(np.argmax(kept))] <= 0.0:
        raise ConfigError("quantization shortfall swallowed the largest atom")
    snapped = kept * _SNAP_GRAIN
    if math.fsum(snapped) != 1.0:
        raise ConfigError("dyadic snapping missed unit mass")
    return keep, snapped


def quantize_density(density, resolution, mode, seed):
    """Quantize a density into atoms of exactly unit total mass.

    ``grid`` places one atom per cell of a regular lattice over the box and
    weights it by the density value; ``random`` draws atom positions by
    rejection sampling and gives them equal weights.  Both snap weights so
    the atom masses fsum to exactly 1.0.
    """
    resolution = int(resolution)
    if resolution < 2:
        raise ConfigError("resolution must be at least 2")
    count = resolution ** density.dimension
    if count > _ATOM_BUDGET:
        raise ConfigError(
            f"resolution {resolution} needs {count} atoms; "
            f"budget is {_ATOM_BUDGET}")
    if mode == "grid":
        axes = [density.box_low[i] + (np.arange(resolution) + 0.5)
                * (density.box_high[i] - density.box_low[i]) / resolution
                for i in range(density.dimension)]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([g.ravel() for g in mesh], axis=1)
        values = np.asarray(density.pdf(points), dtype=float)
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise ConfigError("density returned invalid values on the grid")
        keep, weights = _snap_unit_weights(values)
        return points[keep], weights
    if mode == "random":
        rng = np.random.default_rng([0x5EED, int(seed), resolution])
        span = density.box_high - density.box_low
        accepted = []
        have = 0
        for _ in range(400):
            draws = density.box_low + rng.uniform(
                size=(4 * count, density.dimension)) * span
            bar = rng.uniform(0.0, density.pdf_sup, size=len(draws))
            hits = draws[np.asarray(density.pdf(draws), dtype=float) > bar]
            accepted.append(hits)
            have += len(hits)
            if have >= count:
                break
        else:
            raise ConfigError("rejection sampling stalled; density too peaked")
        points = np.concatenate(accepted, axis=0)[:count]
        _, weights = _snap_unit_weights(np.full(count, 1.0 / count))
        return points, weights
    raise ConfigError(f"unknown quantization mode {mode!r}")


# -- configuration --------------------------------------------------------------

_FIELD_PARAMS = {
    "constant": ("velocity",),
    "linear": ("matrix",),
    "rotation": (),
    "osgood1d": ("modulus_constant",),
    "osgood_plane": ("modulus_constant",),
    "nonosgood_plane": ("modulus_constant",),
}


def build_field(kind, params):
    """Instantiate a catalog field from its config block."""
    if kind not in FIELD_CATALOG:
        known = ", ".join(sorted(FIELD_CATALOG))
        raise ConfigError(f"unknown field kind {kind!r} (known: {known})")
    _require(dict(params, kind=None), (*_FIELD_PARAMS[kind], "kind"),
             f"{kind} field")
    try:
        if kind == "constant":
            return FIELD_CATALOG[kind](tuple(params.get("velocity", (1.0,))))
        if kind == "linear":
            return FIELD_CATALOG[kind](np.asarray(params["matrix"],
                                                  dtype=float))
        if kind == "rotation":
            return FIELD_CATALOG[kind]()
        if "modulus_constant" in params:
            return FIELD_CATALOG[kind](float(params["modulus_constant"]))
        return FIELD_CATALOG[kind]()
    except KeyError as missing:
        raise ConfigError(f"{kind} field needs parameter {missing}") from None


_CONFIG_DEFAULTS = {
    "time_points": 5,
    "resolution": 9,
    "quantization": "grid",
    "difference_mode": "tolerance",
    "cutoff_levels": (2.0,),
    "parameters": "schedule",
    "abs_tol": 1e-11,
    "rel_tol": 1e-9,
    "coarse_factor": 100.0,
    "cells_per_alpha": 4,
    "weak_tol": 1.0,
}

_CONFIG_KEYS = ("name", "field", "density", "horizon", "seed",
                *_CONFIG_DEFAULTS)


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario description; every run setting lives here."""

    name: str
    field_kind: str
    field_params: dict
    density: dict
    horizon: float
    time_points: int
    resolution: int
    quantization: str
    difference_mode: str
    cutoff_levels: tuple
    parameters: object
    abs_tol: float
    rel_tol: float
    coarse_factor: float
    cells_per_alpha: int
    seed: int
    weak_tol: float

    @staticmethod
    def from_dict(doc, seed_override=None):
        if not isinstance(doc, dict):
            raise ConfigError("scenario config must be a JSON object")
        extra = set(doc) - set(_CONFIG_KEYS)
        if extra:
            raise ConfigError(
                f"unknown config key(s): {', '.join(sorted(extra))}")
        merged = {**_CONFIG_DEFAULTS, **doc}
        for key in ("name", "field", "density", "horizon"):
            if key not in merged:
                raise ConfigError(f"config key {key!r} is required")

        name = str(merged["name"])
        if not name or any(ch in name for ch in "/\\ \t"):
            raise ConfigError("scenario name must be a short filename stem")
        field_block = merged["field"]
        if not isinstance(field_block, dict) or "kind" not in field_block:
            raise ConfigError("field block needs a \"kind\" key")
        density = merged["density"]
        if not isinstance(density, dict) or "kind" not in density:
            raise ConfigError("density block needs a \"kind\" key")

        horizon = float(merged["horizon"])
        if not horizon > 0.0:
            raise ConfigError("horizon must be positive")
        time_points = int(merged["time_points"])
        if time_points < 2:
            raise ConfigError("time grid needs at least two points")
        quantization = merged["quantization"]
        if quantization not in ("grid", "random"):
            raise ConfigError("quantization must be \"grid\" or \"random\"")
        mode = merged["difference_mode"]
        if mode not in ("tolerance", "resolution"):
            raise ConfigError(
                "difference_mode must be \"tolerance\" or \"resolution\"")
        if mode == "resolution" and density["kind"] == "atoms":
            raise ConfigError(
                "resolution differencing needs a sampled density, "
                "not explicit atoms")

        levels = merged["cutoff_levels"]
        try:
            levels = tuple(sorted(float(k) for k in levels))
        except TypeError:
            raise ConfigError("cutoff_levels must be a list of radii") \
                from None
        if not levels or any(k < 1.0 for k in levels):
            raise ConfigError("cutoff levels must be radii of at least 1")
        if len(set(levels)) != len(levels):
            raise ConfigError("cutoff levels must be distinct")

        parameters = merged["parameters"]
        if parameters != "schedule":
            if not isinstance(parameters, dict) or \
                    set(parameters) != {"beta", "delta", "alpha"}:
                raise ConfigError(
                    "parameters must be \"schedule\" or an object with "
                    "exactly beta, delta, alpha")
            parameters = {key: float(parameters[key]) for key in parameters}
            if parameters["beta"] <= 0.0 or parameters["delta"] <= 0.0:
                raise ConfigError("beta and delta must be positive")
            if not 0.0 < parameters["alpha"] < 1.0:
                raise ConfigError("alpha must lie in (0, 1)")

        abs_tol = float(merged["abs_tol"])
        rel_tol = float(merged["rel_tol"])
        if abs_tol <= 0.0 or rel_tol <= 0.0:
            raise ConfigError("integrator tolerances must be positive")
        coarse = float(merged["coarse_factor"])
        if mode == "tolerance" and not coarse > 1.0:
            raise ConfigError(
                "coarse_factor must exceed 1 for tolerance differencing")
        cells = int(merged["cells_per_alpha"])
        if cells < 4:
            raise ConfigError("cells_per_alpha must be at least 4")
        weak_tol = float(merged["weak_tol"])
        if not weak_tol > 0.0:
            raise ConfigError("weak_tol must be positive")

        seed = seed_override if seed_override is not None \
            else merged.get("seed")
        if seed is None:
            raise ConfigError(
                "a seed is required (config key \"seed\" or --seed)")
        seed = int(seed)

        resolution = int(merged["resolution"])
        field_params = {k: v for k, v in field_block.items() if k != "kind"}
        return ScenarioConfig(
            name=name, field_kind=field_block["kind"],
            field_params=field_params, density=dict(density),
            horizon=horizon, time_points=time_points, resolution=resolution,
            quantization=quantization, difference_mode=mode,
            cutoff_levels=levels, parameters=parameters, abs_tol=abs_tol,
            rel_tol=rel_tol, coarse_factor=coarse, cells_per_alpha=cells,
            seed=seed, weak_tol=weak_tol)

    def to_dict(self):
        doc = {
            "name": self.name,
            "field": {"kind": self.field_kind, **self.field_params},
            "density": self.density,
            "horizon": self.horizon,
            "time_points": self.time_points,
            "resolution": self.resolution,
            "quantization": self.quantization,
            "difference_mode": self.difference_mode,
            "cutoff_levels": list(self.cutoff_levels),
            "parameters": self.parameters,
            "abs_tol": self.abs_tol,
            "rel_tol": self.rel_tol,
            "coarse_factor": self.coarse_factor,
            "cells_per_alpha": self.cells_per_alpha,
            "seed": self.seed,
            "weak_tol": self.weak_tol,
        }
        return doc


def load_config(path, seed_override=None):
    """Read and validate a scenario config file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except (OSError, ValueError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return ScenarioConfig.from_dict(doc, seed_override=seed_override)


def _initial_atoms(config, resolution, salt):
    """Atoms for the initial measure at a given resolution."""
    block = config.density
    if block["kind"] == "atoms":
        _require(block, ("kind", "atoms"), "atoms density")
        atoms = block.get("atoms")
        if not atoms:
            raise ConfigError("explicit atoms list is empty")
        locations = np.asarray([entry[0] for entry in atoms], dtype=float)
        if locations.ndim == 1:
            locations = locations[:, None]
        weights = np.asarray([entry[1] for entry in atoms], dtype=float)
        if np.any(weights == 0.0) or not np.all(np.isfinite(weights)):
            raise ConfigError("explicit atom weights must be finite nonzero")
        return locations, weights
    density = density_from_config(block)
    return quantize_density(density, resolution, config.quantization,
                            config.seed + salt)


# -- scenario run ----------------------------------------------------------------


@dataclass(frozen=True)
class LevelResult:
    """Everything one cutoff level contributes to the report."""

    level: float
    schedule: Schedule
    alpha_used: float
    report: DiagnosticsReport
    invariants: dict
    final_gap: float
    final_bound: float


@dataclass(frozen=True)
class ScenarioResult:
    exit_code: int
    summary: dict
    levels: tuple
    summary_path: str
    report_paths: dict


def _difference_measure(dimension, loc_fine, w_fine, loc_coarse, w_coarse):
    # refined minus baseline; merging cancels bit-identical twins exactly,
    # so a difference of equal clouds is the empty measure
    locations = np.vstack([loc_fine, loc_coarse])
    weights = np.concatenate([w_fine, -w_coarse])
    return measure_from_arrays(dimension, locations, weights, merge=True)


def _tail_variation(measure, radius):
    if measure.atom_count == 0:
        return abs(measure.reservoir_weight)
    radii = np.linalg.norm(measure.locations, axis=1)
    far = np.abs(measure.weights[radii >= radius])
    return math.fsum([*far, abs(measure.reservoir_weight)])


def _level_job(field, config, level, times, diffs):
    cutoff = build_cutoff(field.growth, level)
    const = field.modulus_constant_for(cutoff.r_zero + 1.0)
    snapshots = list(zip(times, diffs))

    totals = [m.total_variation() for m in diffs]
    tails = [_tail_variation(m, level - 1.0) for m in diffs]
    var_integral = trapezoid_rule(totals, times)
    var_floor = max(trapezoid_rule(tails, times), 1.0 / level)

    if config.parameters == "schedule":
        schedule = parameter_schedule(
            level, var_integral, var_floor, const, field.growth_const,
            field.modulus, growth_at_k=float(field.growth(level)))
        scheduled = True
    else:
        given = config.parameters
        schedule = Schedule(
            k=level, variation_integral=var_integral,
            variation_floor=var_floor, beta=given["beta"],
            delta=given["delta"], alpha=given["alpha"],
            j_target=saturation_integral(field.modulus, given["delta"]))
        scheduled = False

    # the bound only improves for smaller alpha; keep the lattice workable
    alpha_used = min(schedule.alpha, 0.5)
    spec = MollifierSpec(alpha_used, field.dimension,
                         cells_per_alpha=config.cells_per_alpha)
    cost = ConcaveCost(field.modulus, schedule.delta, schedule.beta)

    rows = []
    final_pair = None
    final_value = 0.0
    worst_gap = -math.inf
    for i, t in enumerate(times):
        pair = build_mu_nu(diffs[i], cutoff, spec)
        value = D_functional(pair, cost)
        if i == 0:
            estimate = CostEstimate(0.0, 0.0, 0.0)
        else:
            estimate = costestimate_bound(field, snapshots[:i + 1], cutoff,
                                          cost, alpha_used)
        w_ref = reference_W(balance_with_reservoir(
            *jordan_decompose(diffs[i])))
        rows.append((t, value, estimate.term1, estimate.term2,
                     estimate.term3, estimate.bound, w_ref,
                     mass_balance(diffs[i])))
        worst_gap = max(worst_gap,
                        value - estimate.bound * (1.0 + _BOUND_SLACK))
        final_pair, final_value = pair, value

    last = rows[-1]
    invariants = {}
    if config.difference_mode == "tolerance":
        invariants["d_le_bound"] = bool(worst_gap <= 1e-15)
    if scheduled:
        invariants["schedule_terms"] = bool(
            max(last[2], last[3], last[4]) <= 1.0 + _TERM_SLACK)
        invariants["d_le_three"] = bool(
            final_value <= 3.0 * (1.0 + _BOUND_SLACK))
    chain_ok = True
    for eps in (0.1, 0.01):
        lhs = reference_W(final_pair)
        rhs = comparison_bound(cost, final_value, eps,
                               final_pair.total_mass())
        chain_ok = chain_ok and lhs <= rhs * (1.0 + 1e-9) + 1e-12
    invariants["comparison_chain"] = bool(chain_ok)

    return LevelResult(level=level, schedule=schedule, alpha_used=alpha_used,
                       report=DiagnosticsReport.from_rows(rows),
                       invariants=invariants, final_gap=worst_gap,
                       final_bound=last[5])


def _report_payload(report):
    from .diagnostics import _REPORT_COLUMNS
    return {"columns": list(_REPORT_COLUMNS),
            "rows": [list(row) for row in report.rows]}


def run_scenario(config, out_dir, threads=1, fmt="csv"):
    """Run one scenario end to end and write reports plus a summary.

    Returns a :class:`ScenarioResult` whose exit code is 0 exactly when
    every checked invariant held: the transport functional stays under its
    three-term bound, scheduled parameters keep each term at most 1 and the
    functional at most 3, the comparison chain closes, differences carry
    exactly zero signed mass, and the weak-form residual stays under the
    configured tolerance.
    """
    if fmt not in ("csv", "json"):
        raise ConfigError("format must be \"csv\" or \"json\"")
    threads = max(1, int(threads))
    os.makedirs(out_dir, exist_ok=True)

    field = build_field(config.field_kind, config.field_params)
    times = np.linspace(0.0, config.horizon, config.time_points)

    if config.difference_mode == "tolerance":
        locations, weights = _initial_atoms(config, config.resolution, 0)
        if locations.shape[1] != field.dimension:
            raise ConfigError("density dimension does not match the field")
        fine_opts = FlowOptions(abs_tol=config.abs_tol,
                                rel_tol=config.rel_tol)
        coarse_opts = FlowOptions(
            abs_tol=config.abs_tol * config.coarse_factor,
            rel_tol=config.rel_tol * config.coarse_factor)
        frames_fine = flow_map(field, locations, times, fine_opts)
        frames_coarse = flow_map(field, locations, times, coarse_opts)
        weights_fine = weights_coarse = weights
    else:
        loc_coarse, weights_coarse = _initial_atoms(
            config, config.resolution, 0)
        loc_fine, weights_fine = _initial_atoms(
            config, 2 * config.resolution, 1)
        if loc_fine.shape[1] != field.dimension:
            raise ConfigError("density dimension does not match the field")
        fine_opts = FlowOptions(abs_tol=config.abs_tol,
                                rel_tol=config.rel_tol)
        frames_fine = flow_map(field, loc_fine, times, fine_opts)
        frames_coarse = flow_map(field, loc_coarse, times, fine_opts)

    diffs = [_difference_measure(field.dimension, frames_fine[i],
                                 weights_fine, frames_coarse[i],
                                 weights_coarse)
             for i in range(len(times))]
    solution = [(t, measure_from_arrays(field.dimension, frames_fine[i],
                                        weights_fine, merge=False))
                for i, t in enumerate(times)]

    mass_ok = all(mass_balance(m) == 0.0 for m in diffs)
    residual = weak_solution_residual(field, solution)

    def job(level):
        return _level_job(field, config, level, times, diffs)

    if threads > 1 and len(config.cutoff_levels) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            levels = list(pool.map(job, config.cutoff_levels))
    else:
        levels = [job(level) for level in config.cutoff_levels]

    report_paths = {}
    for result in levels:
        stem = f"{config.name}_k{result.level:g}"
        path = os.path.join(out_dir, f"{stem}.{fmt}")
        if fmt == "csv":
            result.report.to_csv(path)
        else:
            atomic_write_text(path, json.dumps(
                _report_payload(result.report), indent=2, sort_keys=True)
                + "\n")
        report_paths[f"{result.level:g}"] = os.path.basename(path)

    invariants = {"mass_zero": bool(mass_ok),
                  "weak_residual": bool(residual <= config.weak_tol)}
    per_level = {}
    schedules = {}
    for result in levels:
        per_level[f"{result.level:g}"] = result.invariants
        sched = result.schedule
        schedules[f"{result.level:g}"] = {
            "beta": sched.beta, "delta": sched.delta, "alpha": sched.alpha,
            "alpha_used": result.alpha_used, "j_target": sched.j_target,
            "variation_integral": sched.variation_integral,
            "variation_floor": sched.variation_floor,
        }

    flat = [*invariants.values()]
    for block in per_level.values():
        flat.extend(block.values())
    exit_code = 0 if all(flat) else 1

    summary = {
        "name": config.name,
        "field": config.field_kind,
        "difference_mode": config.difference_mode,
        "seed": config.seed,
        "invariants": {**invariants, "levels": per_level},
        "schedules": schedules,
        "weak_residual_value": residual,
        "reports": report_paths,
        "exit_code": exit_code,
    }
    summary_path = os.path.join(out_dir, f"{config.name}_summary.json")
    atomic_write_text(summary_path,
                      json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ScenarioResult(exit_code=exit_code, summary=summary,
                          levels=tuple(levels), summary_path=summary_path,
                          report_paths=report_paths)


# -- refinement study --------------------------------------------------------------


@dataclass(frozen=True)
class StudyResult:
    exit_code: int
    resolutions: tuple
    distances: tuple
    ratios: tuple
    warning: bool
    passed: bool
    summary_path: str
    table_path: str


def convergence_study(config, out_dir, rungs=4, threads=1, fmt="csv"):
    """Quantize one datum on a resolution ladder and compare rung endpoints.

    Each rung doubles the resolution, flows its atoms to the horizon with
    the tight tolerances, and the flat transport distance between
    consecutive rungs lands in the table.  Lipschitz fields must shrink the
    distance by at least 1.8 per rung; Osgood fields must shrink it
    strictly; fields outside the Osgood class only raise a warning flag.
    """
    if rungs < 3:
        raise ConfigError("a refinement study needs at least three rungs")
    if fmt not in ("csv", "json"):
        raise ConfigError("format must be \"csv\" or \"json\"")
    if config.density["kind"] == "atoms":
        raise ConfigError("a refinement study needs a sampled density")
    threads = max(1, int(threads))
    os.makedirs(out_dir, exist_ok=True)

    field = build_field(config.field_kind, config.field_params)
    density = density_from_config(config.density)
    if density.dimension != field.dimension:
        raise ConfigError("density dimension does not match the field")
    resolutions = [config.resolution * 2 ** j for j in range(rungs)]
    opts = FlowOptions(abs_tol=config.abs_tol, rel_tol=config.rel_tol)

    def rung(resolution):
        points, weights = quantize_density(
            density, resolution, config.quantization,
            config.seed + resolution)
        frames = flow_map(field, points,
                          np.array([0.0, config.horizon]), opts)
        return frames[-1], weights

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            endpoints = list(pool.map(rung, resolutions))
    else:
        endpoints = [rung(r) for r in resolutions]

    distances = []
    for (loc_a, w_a), (loc_b, w_b) in zip(endpoints, endpoints[1:]):
        diff = _difference_measure(field.dimension, loc_b, w_b, loc_a, w_a)
        distances.append(reference_W(balance_with_reservoir(
            *jordan_decompose(diff))))
    ratios = []
    for a, b in zip(distances, distances[1:]):
        ratios.append(a / b if b > 0.0 else math.inf)

    warning = not field.modulus.osgood
    if field.lipschitz:
        passed = all(r >= 1.8 for r in ratios)
    elif field.modulus.osgood:
        passed = all(a > b for a, b in zip(distances, distances[1:]))
    else:
        passed = True

    header = ("rung", "resolution", "w_refine", "ratio")
    rows = []
    for j, resolution in enumerate(resolutions):
        w_val = distances[j] if j < len(distances) else math.nan
        ratio = ratios[j - 1] if 1 <= j <= len(ratios) else math.nan
        rows.append((j, resolution, w_val, ratio))

    table_path = os.path.join(out_dir, f"{config.name}_refinement.{fmt}")
    if fmt == "csv":
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(repr(float(x)) for x in row))
        atomic_write_text(table_path, "\n".join(lines) + "\n")
    else:
        atomic_write_text(table_path, json.dumps(
            {"columns": list(header), "rows": [list(map(float, r))
                                               for r in rows]},
            indent=2, sort_keys=True) + "\n")

    exit_code = 0 if passed else 1
    summary = {
        "name": config.name,
        "field": config.field_kind,
        "seed": config.seed,
        "resolutions": resolutions,
        "distances": distances,
        "ratios": ratios,
        "lipschitz": bool(field.lipschitz),
        "osgood": bool(field.modulus.osgood),
        "warning_non_osgood": warning,
        "passed": passed,
        "exit_code": exit_code,
    }
    summary_path = os.path.join(out_dir, f"{config.name}_refinement_summary.json")
    atomic_write_text(summary_path,
                      json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return StudyResult(exit_code=exit_code, resolutions=tuple(resolutions),
                       distances=tuple(distances), ratios=tuple(ratios),
                       warning=warning, passed=passed,
                       summary_path=summary_path, table_path=table_path)


# -- canned scenarios ---------------------------------------------------------------


_BUILTIN_CONFIGS = {
    "rotation_ring": {
        "name": "rotation_ring",
        "field": {"kind": "rotation"},
        "density": {"kind": "ring", "radius": 0.5, "width": 0.06},
        "horizon": 1.0,
        "time_points": 5,
        "resolution": 9,
        "seed": 7,
    },
    "osgood_line": {
        "name": "osgood_line",
        "field": {"kind": "osgood1d"},
        "density": {"kind": "interval", "low": 0.15, "high": 0.85},
        "horizon": 1.0,
        "time_points": 5,
        "resolution": 96,
        "seed": 11,
    },
    "osgood_disc": {
        "name": "osgood_disc",
        "field": {"kind": "osgood_plane"},
        "density": {"kind": "ring", "radius": 0.28, "width": 0.04},
        "horizon": 1.0,
        "time_points": 5,
        "resolution": 9,
        "parameters": {"beta": 0.1, "delta": 0.05, "alpha": 0.25},
        "seed": 13,
    },
    "shear_line": {
        "name": "shear_line",
        "field": {"kind": "linear", "matrix": [[1.0]]},
        "density": {"kind": "interval", "low": 0.2, "high": 0.8},
        "horizon": 1.0,
        "time_points": 3,
        "resolution": 24,
        "seed": 17,
    },
    "drift_line": {
        "name": "drift_line",
        "field": {"kind": "constant", "velocity": [0.35]},
        "density": {"kind": "two_bumps", "centers": [[-0.3], [0.35]],
                    "spread": 0.09},
        "horizon": 1.0,
        "time_points": 3,
        "resolution": 24,
        "seed": 19,
    },
    "mixing_disc": {
        "name": "mixing_disc",
        "field": {"kind": "nonosgood_plane"},
        "density": {"kind": "ring", "radius": 0.28, "width": 0.04},
        "horizon": 1.0,
        "time_points": 3,
        "resolution": 6,
        "seed": 23,
    },
}


def builtin_config(name):
    """A fresh copy of one of the canned scenario documents."""
    if name not in _BUILTIN_CONFIGS:
        known = ", ".join(sorted(_BUILTIN_CONFIGS))
        raise ConfigError(f"unknown builtin scenario {name!r} (known: {known})")
    return json.loads(json.dumps(_BUILTIN_CONFIGS[name]))


def builtin_names():
    return tuple(sorted(_BUILTIN_CONFIGS))


# -- selftest ----------------------------------------------------------------------


def selftest(echo=print):
    """Fast deterministic sanity checks; returns a process exit code."""
    results = []

    def record(label, ok, detail=""):
        suffix = f"  ({detail})" if detail and not ok else ""
        echo(f"{'PASS' if ok else 'FAIL'} {label}{suffix}")
        results.append(ok)

    cut = build_cutoff(growth_affine(), 1.0)
    want = 2.0 * math.e - 1.0
    record("cutoff-window-radius", abs(cut.r_zero - want) <= 1e-8,
           f"r_zero={cut.r_zero!r}")

    cost = ConcaveCost(modulus_linear(), 0.25, 2.0)
    closed = 2.0 * math.log(1.25 / 0.25)
    record("cost-closed-form", abs(cost.cost(1.0) - closed) <= 1e-9 * closed,
           f"cost(1)={cost.cost(1.0)!r}")

    ok = True
    for frac in (0.2, 0.65, 0.95):
        value = frac * closed
        radius = cost.cost_inverse(value)
        ok = ok and abs(cost.cost(radius) - value) <= 1e-9 * (1.0 + value)
    record("cost-inverse-roundtrip", ok)

    mu_raw = make_measure(1, [((0.0,), 0.4), ((0.7,), 0.35), ((1.4,), 0.25)])
    nu_raw = make_measure(1, [((0.2,), 0.3), ((1.0,), 0.45)])
    pair = balance_with_reservoir(mu_raw, nu_raw)
    plan, _ = solve_ot(pair, cost)
    check, _ = brute_force_ot(pair, cost)
    record("transport-dual-route",
           abs(plan.primal_value - check) <= 1e-9 * (1.0 + abs(check)),
           f"simplex={plan.primal_value!r} enumeration={check!r}")

    end = integrate_flow(rotation_field(), (1.0, 0.0),
                         0.0, math.pi / 2.0).final_state
    record("rotation-quarter-turn",
           abs(end[0]) <= 1e-8 and abs(end[1] - 1.0) <= 1e-8,
           f"end={end!r}")

    density = density_from_config(
        {"kind": "gaussian", "center": [0.0, 0.0], "spread": 0.2})
    _, grid_w = quantize_density(density, 7, "grid", 0)
    _, rand_w = quantize_density(density, 7, "random", 3)
    record("unit-mass-quantization",
           math.fsum(grid_w) == 1.0 and math.fsum(rand_w) == 1.0)

    atom = make_measure(2, [((0.05, -0.02), 0.625)])
    smooth = mollify(atom, MollifierSpec(0.25, 2))
    record("mollifier-mass-conservation",
           abs(math.fsum(smooth.weights) - 0.625) <= 1e-12)

    return 0 if all(results) else 1
