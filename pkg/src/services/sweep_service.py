"""
Sweep Service

This module runs seeded, disorder-averaged parameter sweeps over grids of
(d, c, kappa, gamma_loss, J, delta_omega), writes the resulting efficiency
surfaces, and checks whether families of curves collapse onto a common
Lambda window.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from src import __version__
from src.services.dynamics_service import (
    OpenSystemSpec,
    propagate,
    run_to_completion,
)
from src.services.network_service import DisorderSpec, build_preset, localized_state
from src.services.observables_service import fit_diffusion, msd_curve
from src.services.theory_service import (
    lambda_localized,
    lambda_param,
    theory_localization,
)
from src.utils.config import (
    NETWORK_AXES,
    SweepConfig,
    config_hash,
    config_to_dict,
    get_budget,
    get_thread_count,
)
from src.utils.errors import (
    BudgetExceededError,
    InvalidArgumentError,
    NumericalFailure,
    SchemaError,
)
from src.utils.storage import read_csv, read_json, write_csv, write_json

logger = logging.getLogger(__name__)

# Loss rate as a fraction of J when the config leaves gamma_loss unset
DEFAULT_LOSS_FRACTION = 1e-3
# Share of the peak efficiency that counts as the plateau
PLATEAU_SHARE = 0.9
# Families whose efficiency varies less than this are flagged unconverged
FLAT_CURVE = 0.01
# Fixed exponent for the comparable diffusion constant
DIFFUSIVE_EXPONENT = 0.5
DIFFUSION_SAMPLES = 500

BASE_COLUMNS = ["lambda", "eta_mean", "eta_stderr", "transfer_time_mean"]
EXTRA_COLUMNS = ["transfer_time_stderr", "loss_mean", "lambda_localized"]
DIFFUSION_COLUMNS = ["diffusion_exponent_mean", "diffusion_constant_mean"]


@dataclass
class SweepPoint:
    """Seed-averaged observables at one grid point."""

    index: Tuple[int, ...]
    coordinates: Dict[str, float]
    lambda_value: float = math.nan
    eta_mean: float = math.nan
    eta_stderr: float = 0.0
    transfer_time_mean: float = math.nan
    transfer_time_stderr: float = 0.0
    loss_mean: float = math.nan
    lambda_localized: Optional[float] = None
    diffusion_exponent_mean: Optional[float] = None
    diffusion_constant_mean: Optional[float] = None
    flags: Tuple[str, ...] = ()


@dataclass
class SweepResult:
    """A grid of SweepPoints in row-major axis order plus run metadata."""

    axes: Tuple[Tuple[str, Tuple[float, ...]], ...]
    points: List[SweepPoint]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = int(np.prod([len(values) for _, values in self.axes]))
        if len(self.points) != expected:
            raise InvalidArgumentError(
                f"Sweep has {len(self.points)} points, axes imply {expected}"
            )

    @property
    def axis_names(self):
        return [name for name, _ in self.axes]

    @property
    def has_diffusion(self):
        return any(p.diffusion_exponent_mean is not None for p in self.points)


@dataclass
class FamilyReport:
    """Peak and plateau of one efficiency-versus-d curve."""

    label: str
    coordinates: Dict[str, float]
    peak_lambda: float
    peak_d: float
    eta_max: float
    plateau: Tuple[float, float]
    plateau_decades: float
    unconverged: bool = False


def derive_seed(master_seed, point_index, realization):
    """
    Per-realization disorder seed.

    Pure in its arguments: the same (master_seed, point_index, realization)
    gives the same seed regardless of when or where it is computed.

    Args:
        master_seed (int): 64-bit master seed
        point_index (tuple): Grid indices identifying the disorder draw
        realization (int): Realization index

    Returns:
        int: 64-bit unsigned seed
    """
    sequence = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=tuple(int(i) for i in point_index) + (int(realization),),
    )
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def grid_indices(cfg):
    """Every grid index tuple in row-major order (last axis fastest)."""
    return list(itertools.product(*(range(len(values)) for _, values in cfg.grid)))


def network_index(cfg, index):
    """The part of a grid index that selects the disorder draws."""
    return tuple(i for (name, _), i in zip(cfg.grid, index) if name in NETWORK_AXES)


def point_parameters(cfg, index):
    """
    Resolve the physical parameters of one grid point.

    Args:
        cfg (SweepConfig): Sweep configuration
        index (tuple): Grid index

    Returns:
        dict: d, c, kappa, gamma_loss, J, delta_omega in rad/ps
    """
    params = {
        "d": cfg.d,
        "c": cfg.c,
        "kappa": cfg.kappa,
        "gamma_loss": cfg.gamma_loss,
        "J": cfg.J,
        "delta_omega": cfg.disorder_width,
    }
    for (name, values), i in zip(cfg.grid, index):
        params[name] = values[i]
    if params["gamma_loss"] is None:
        params["gamma_loss"] = DEFAULT_LOSS_FRACTION * params["J"]
    return params


def point_lambda(params, n_sites):
    """
    Lambda of a grid point with ell from theory_localization.

    Returns:
        tuple: (lambda, lambda_localized or None when ell does not clamp to 1)
    """
    J, d, delta_omega = params["J"], params["d"], params["delta_omega"]
    ell = theory_localization(J, delta_omega, n_sites)
    value = lambda_param(d, ell, J) if d > 0 else 0.0
    localized = None
    if delta_omega > 0 and (J / delta_omega) ** 2 <= 1.0:
        localized = lambda_localized(d, J, delta_omega)
    return value, localized


def _fit_spreading(cfg, net, env, rho0):
    t_hi = cfg.diffusion_window[1]
    traj = propagate(
        net,
        OpenSystemSpec(env.dephasing_rate, env.noise_correlation),
        rho0,
        t_hi,
        dt=cfg.dt,
        sample_interval=t_hi / DIFFUSION_SAMPLES,
        method=cfg.method,
    )
    series = msd_curve(traj, cfg.initial_site)
    free = fit_diffusion(series, cfg.diffusion_window)
    fixed = fit_diffusion(series, cfg.diffusion_window, exponent=DIFFUSIVE_EXPONENT)
    return free.exponent, fixed.diffusion_constant


def _run_point(cfg, index):
    """Run every realization of one grid point with single-threaded BLAS."""
    params = point_parameters(cfg, index)
    net_index = network_index(cfg, index)
    env = OpenSystemSpec(
        dephasing_rate=params["d"],
        noise_correlation=params["c"],
        sink_rate=params["kappa"],
        loss_rate=params["gamma_loss"],
    )
    rho0 = localized_state(cfg.n_sites, cfg.initial_site)
    samples = {
        "eta": [],
        "loss": [],
        "transfer_time": [],
        "exponent": [],
        "diffusion_constant": [],
    }
    failed = nonconverged = fit_failed = 0

    with threadpool_limits(limits=1):
        for realization in range(cfg.realizations):
            disorder = DisorderSpec(
                width=params["delta_omega"],
                distribution=cfg.distribution,
                seed=derive_seed(cfg.master_seed, net_index, realization),
            )
            net = build_preset(
                cfg.preset, cfg.n_sites, params["J"], disorder, sink_site=cfg.sink
            )
            try:
                outcome = run_to_completion(
                    net, env, rho0, cfg.t_max, method=cfg.method, dt=cfg.dt
                )
            except (InvalidArgumentError, NumericalFailure, np.linalg.LinAlgError) as e:
                logger.warning(f"Point {index} realization {realization} failed: {e}")
                failed += 1
                continue

            nonconverged += not outcome.converged
            samples["eta"].append(outcome.efficiency)
            samples["loss"].append(outcome.loss)
            samples["transfer_time"].append(outcome.transfer_time)

            if "diffusion" in cfg.outputs:
                try:
                    exponent, constant = _fit_spreading(cfg, net, env, rho0)
                except (InvalidArgumentError, NumericalFailure) as e:
                    logger.warning(f"Point {index} diffusion fit failed: {e}")
                    fit_failed += 1
                    continue
                samples["exponent"].append(exponent)
                samples["diffusion_constant"].append(constant)

    counts = {"failed": failed, "nonconverged": nonconverged, "diffusion_fit": fit_failed}
    return params, samples, counts


def _mean_stderr(values):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return math.nan, 0.0
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def _aggregate(cfg, index, params, samples, counts):
    eta_mean, eta_stderr = _mean_stderr(samples["eta"])
    transfer_mean, transfer_stderr = _mean_stderr(samples["transfer_time"])
    loss_mean, _ = _mean_stderr(samples["loss"])
    lambda_value, localized = point_lambda(params, cfg.n_sites)

    point = SweepPoint(
        index=tuple(index),
        coordinates={name: params[name] for name, _ in cfg.grid},
        lambda_value=lambda_value,
        eta_mean=eta_mean,
        eta_stderr=eta_stderr,
        transfer_time_mean=transfer_mean,
        transfer_time_stderr=transfer_stderr,
        loss_mean=loss_mean,
        lambda_localized=localized,
        flags=tuple(f"{name}={count}" for name, count in counts.items() if count),
    )
    if "diffusion" in cfg.outputs:
        point.diffusion_exponent_mean = _mean_stderr(samples["exponent"])[0]
        point.diffusion_constant_mean = _mean_stderr(samples["diffusion_constant"])[0]
    if point.flags:
        logger.warning(f"Sweep point {point.coordinates} flagged: {';'.join(point.flags)}")
    return point


def seed_table(cfg):
    """Seeds used for every distinct disorder draw, keyed by network index."""
    network_axes = [(name, values) for name, values in cfg.grid if name in NETWORK_AXES]
    table = {}
    for net_index in itertools.product(*(range(len(v)) for _, v in network_axes)):
        label = ",".join(
            f"{name}={i}" for (name, _), i in zip(network_axes, net_index)
        ) or "base"
        table[label] = [
            derive_seed(cfg.master_seed, net_index, r) for r in range(cfg.realizations)
        ]
    return table


def run_sweep(cfg, n_jobs=None, budget=None):
    """
    Run a disorder-averaged sweep.

    Args:
        cfg (SweepConfig): Sweep configuration
        n_jobs (int): joblib worker count; defaults to GOLDILOCKS_THREADS
        budget (int): Propagation cap; defaults to cfg.budget, then GOLDILOCKS_BUDGET

    Returns:
        SweepResult: Per-point means, standard errors, Lambda and flags

    Raises:
        BudgetExceededError: If the sweep needs more propagations than the cap
    """
    if not isinstance(cfg, SweepConfig):
        raise InvalidArgumentError("run_sweep needs a SweepConfig")
    if budget is None:
        budget = cfg.budget if cfg.budget is not None else get_budget()
    requested = cfg.propagation_count * (2 if "diffusion" in cfg.outputs else 1)
    if requested > budget:
        raise BudgetExceededError(requested, budget)
    if n_jobs is None:
        n_jobs = get_thread_count()

    indices = grid_indices(cfg)
    logger.info(
        f"Running sweep: {len(indices)} points x {cfg.realizations} realizations "
        f"({requested} propagations, n_jobs={n_jobs})"
    )

    outputs = Parallel(n_jobs=n_jobs)(delayed(_run_point)(cfg, index) for index in indices)
    points = [
        _aggregate(cfg, index, params, samples, counts)
        for index, (params, samples, counts) in zip(indices, outputs)
    ]

    metadata = {
        "code_version": __version__,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "master_seed": cfg.master_seed,
        "realizations": cfg.realizations,
        "seed_lineage": "SeedSequence(master_seed, spawn_key=(J, delta_omega indices..., realization))",
        "seeds": seed_table(cfg),
    }
    flagged = sum(1 for p in points if p.flags)
    logger.info(f"Sweep finished: {len(points)} points, {flagged} flagged")
    return SweepResult(axes=tuple(cfg.grid), points=points, metadata=metadata)


def sweep_header(result):
    header = result.axis_names + BASE_COLUMNS + EXTRA_COLUMNS
    if result.has_diffusion:
        header += DIFFUSION_COLUMNS
    return header + ["flags"]


def _point_row(result, point):
    row = [point.coordinates[name] for name in result.axis_names]
    row += [
        point.lambda_value,
        point.eta_mean,
        point.eta_stderr,
        point.transfer_time_mean,
        point.transfer_time_stderr,
        point.loss_mean,
        point.lambda_localized,
    ]
    if result.has_diffusion:
        row += [point.diffusion_exponent_mean, point.diffusion_constant_mean]
    return row + [";".join(point.flags)]


def write_sweep(result, directory, stem="sweep"):
    """
    Write a sweep as CSV plus a JSON metadata sidecar.

    Args:
        result (SweepResult): Sweep to write
        directory (str or Path): Output directory
        stem (str): File stem; files are <stem>.csv and <stem>.meta.json

    Returns:
        list: The written paths
    """
    directory = Path(directory)
    csv_path = write_csv(
        directory / f"{stem}.csv",
        sweep_header(result),
        (_point_row(result, point) for point in result.points),
    )
    meta_path = write_json(directory / f"{stem}.meta.json", result.metadata)
    return [csv_path, meta_path]


_REQUIRED = object()


def _cell(row, name, line, default=_REQUIRED):
    """Parse one sweep cell; a missing or malformed value is a schema error."""
    text = row.get(name)
    if text in ("", None):
        if default is _REQUIRED:
            raise SchemaError("Sweep row is missing a value", field=name, line=line)
        return default
    try:
        return float(text)
    except ValueError:
        raise SchemaError(
            f"Sweep value {text!r} is not a number", field=name, line=line
        ) from None


def read_sweep(path):
    """
    Read a sweep CSV written by write_sweep (and its sidecar, if present).

    Args:
        path (str or Path): Sweep CSV

    Returns:
        SweepResult: The sweep with axes recovered from the header

    Raises:
        SchemaError: If the file lacks the sweep columns or a row or the
            sidecar cannot be parsed (line numbers count the header as 1)
    """
    header, rows = read_csv(path)
    if "lambda" not in header or "eta_mean" not in header:
        raise SchemaError(f"{path} is not a sweep result", field="lambda")
    axis_names = header[: header.index("lambda")]
    if not axis_names:
        raise SchemaError(f"{path} has no grid axes", field="lambda")

    axis_values = {name: [] for name in axis_names}
    parsed = []
    for line, row in enumerate(rows, start=2):
        coordinates = {name: _cell(row, name, line) for name in axis_names}
        for name, value in coordinates.items():
            if value not in axis_values[name]:
                axis_values[name].append(value)
        parsed.append((line, row, coordinates))
    axes = tuple((name, tuple(axis_values[name])) for name in axis_names)

    points = []
    for line, row, coordinates in parsed:
        points.append(
            SweepPoint(
                index=tuple(axis_values[n].index(coordinates[n]) for n in axis_names),
                coordinates=coordinates,
                lambda_value=_cell(row, "lambda", line),
                eta_mean=_cell(row, "eta_mean", line),
                eta_stderr=_cell(row, "eta_stderr", line, default=0.0),
                transfer_time_mean=_cell(row, "transfer_time_mean", line, default=math.nan),
                transfer_time_stderr=_cell(row, "transfer_time_stderr", line, default=0.0),
                loss_mean=_cell(row, "loss_mean", line, default=math.nan),
                lambda_localized=_cell(row, "lambda_localized", line, None),
                diffusion_exponent_mean=_cell(row, "diffusion_exponent_mean", line, None),
                diffusion_constant_mean=_cell(row, "diffusion_constant_mean", line, None),
                flags=tuple(flag for flag in (row.get("flags") or "").split(";") if flag),
            )
        )

    sidecar = Path(path).with_suffix(".meta.json")
    metadata = {}
    if sidecar.exists():
        try:
            metadata = read_json(sidecar)
        except ValueError as e:
            raise SchemaError(f"{sidecar} is not valid JSON: {e}", field="metadata") from e
    return SweepResult(axes=axes, points=points, metadata=metadata)


def _family_report(label, coordinates, members):
    members = sorted(members, key=lambda p: p.coordinates["d"])
    eta = np.array([p.eta_mean for p in members], dtype=float)
    lambdas = [p.lambda_value for p in members]

    if not np.any(np.isfinite(eta)):
        logger.warning(f"Family {label} has no finite efficiencies")
        return FamilyReport(label, coordinates, math.nan, math.nan, math.nan,
                            (math.nan, math.nan), 0.0, unconverged=True)

    peak = int(np.nanargmax(eta))
    eta_max = float(eta[peak])
    threshold = PLATEAU_SHARE * eta_max
    lo = hi = peak
    while lo > 0 and eta[lo - 1] >= threshold:
        lo -= 1
    while hi < len(eta) - 1 and eta[hi + 1] >= threshold:
        hi += 1

    plateau = (float(lambdas[lo]), float(lambdas[hi]))
    if plateau[0] > 0:
        decades = math.log10(plateau[1] / plateau[0])
    else:
        decades = math.inf
    unconverged = float(np.nanmax(eta) - np.nanmin(eta)) < FLAT_CURVE
    if unconverged:
        logger.warning(f"Family {label} is flat; flagged unconverged")

    return FamilyReport(
        label=label,
        coordinates=coordinates,
        peak_lambda=float(lambdas[peak]),
        peak_d=float(members[peak].coordinates["d"]),
        eta_max=eta_max,
        plateau=plateau,
        plateau_decades=decades,
        unconverged=unconverged,
    )


def collapse_check(results):
    """
    Peak Lambda and efficiency plateau of every efficiency-versus-d family.

    A family is the set of points of one result that share every coordinate
    except d.

    Args:
        results (list): SweepResults (a single SweepResult is accepted)

    Returns:
        list: FamilyReport per family, in input order
    """
    if isinstance(results, SweepResult):
        results = [results]

    reports = []
    for number, result in enumerate(results):
        if "d" not in result.axis_names:
            raise InvalidArgumentError("collapse_check needs a d axis in every result")
        others = [name for name in result.axis_names if name != "d"]
        families = {}
        for point in result.points:
            key = tuple(point.coordinates[name] for name in others)
            families.setdefault(key, []).append(point)

        for key, members in families.items():
            coordinates = dict(zip(others, key))
            label = ",".join(f"{name}={value:g}" for name, value in coordinates.items())
            if len(results) > 1:
                label = f"{number}:{label}" if label else str(number)
            reports.append(_family_report(label or "all", coordinates, members))

    return reports


def export_collapse(reports, path):
    """Write collapse reports as CSV."""
    header = [
        "family",
        "peak_lambda",
        "peak_d",
        "eta_max",
        "plateau_lo",
        "plateau_hi",
        "plateau_decades",
        "unconverged",
    ]
    rows = (
        [
            r.label,
            r.peak_lambda,
            r.peak_d,
            r.eta_max,
            r.plateau[0],
            r.plateau[1],
            r.plateau_decades,
            r.unconverged,
        ]
        for r in reports
    )
    return write_csv(path, header, rows)
