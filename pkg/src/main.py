#!/usr/bin/env python3
"""
Goldilocks - Main Entry Point

This script is the command-line entry point. It binds networks, dynamics,
closed-form theory and sweeps into reproducible runs:

    python -m src.main simulate --preset chain --n 2 --J 1 --sink 2 --kappa 1
    python -m src.main sweep config.json --out results/bell
    python -m src.main localize --preset chain --n 32 --J 1 --delta-omega 4
    python -m src.main theory lambda --d 2 --ell 1 --J 1
    python -m src.main collapse results/bell/sweep.csv
    python -m src.main replay results/bell/manifest.json

Every run that writes files also writes a manifest.json listing the command,
resolved configuration, seed, code version and outputs, even when it fails.
"""

import argparse
import dataclasses
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from dotenv import load_dotenv

from src import __version__
from src.services.dynamics_service import (
    METHODS,
    OpenSystemSpec,
    export_trajectory,
    run_to_completion,
)
from src.services.network_service import (
    DISTRIBUTIONS,
    PRESET_KINDS,
    DisorderSpec,
    build_preset,
    load_network,
    localized_state,
)
from src.services.observables_service import (
    export_localization,
    export_msd,
    fit_diffusion,
    localization_report,
    msd_curve,
)
from src.services.sweep_service import (
    collapse_check,
    derive_seed,
    export_collapse,
    read_sweep,
    run_sweep,
    write_sweep,
)
from src.services.theory_service import (
    MicroParams,
    band_splitting,
    decoherence_rate,
    lambda_localized,
    lambda_micro,
    lambda_param,
    localization_time,
    localization_time_from_disorder,
    localized_spread,
    optimal_dephasing,
    optimal_dephasing_from_disorder,
    optimal_spread,
    regime_spread,
    theory_localization,
    two_state,
)
from src.utils.config import (
    DEFAULT_CONFIG_PATH,
    config_to_dict,
    get_log_level,
    load_sweep_config,
)
from src.utils.errors import (
    GoldilocksError,
    InvalidArgumentError,
    NumericalFailure,
)
from src.utils.storage import read_json, write_json
from src.utils.units import from_rad_ps, to_rad_ps

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

MANIFEST_NAME = "manifest.json"

RATE_HELP = "rad/ps, or cm^-1 with --unit cm-1"
TIME_HELP = "ps"
PRECISION_NOTE = "Values are printed rounded to three decimals (Lambda = 1 prints as 1.000)."


class UsageError(InvalidArgumentError):
    """Command-line arguments do not match the subcommand grammar."""


class _ArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclasses.dataclass
class RunManifest:
    """Everything needed to re-run a command and find its outputs."""

    command: str
    argv: list
    resolved_config: dict = dataclasses.field(default_factory=dict)
    master_seed: Optional[int] = None
    code_version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    outputs: list = dataclasses.field(default_factory=list)
    status: str = "running"
    exit_code: Optional[int] = None
    error: Optional[str] = None


def _now():
    return datetime.now(timezone.utc).isoformat()


def _rate(args, value):
    """Convert a rate/energy flag to rad/ps."""
    return None if value is None else to_rad_ps(value, args.unit)


def _print_value(value):
    print(f"{value:.3f}")


def _add_common(parser, out_default=None):
    parser.add_argument(
        "--unit",
        choices=["rad-ps", "rad/ps", "cm-1"],
        default="rad-ps",
        help="Unit of every energy/rate flag and of printed rates (default rad-ps)",
    )
    parser.add_argument(
        "--out",
        default=out_default,
        help="Output directory for result files and manifest.json",
    )


def _add_network_args(parser):
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--network", help="Network JSON file")
    source.add_argument("--preset", choices=PRESET_KINDS, help="Preset topology")
    parser.add_argument("--n", type=int, default=8, help="Preset site count (sites)")
    parser.add_argument("--J", type=float, default=1.0, help=f"Preset coupling ({RATE_HELP})")
    parser.add_argument(
        "--delta-omega",
        type=float,
        default=0.0,
        help=f"Preset disorder width ({RATE_HELP})",
    )
    parser.add_argument(
        "--distribution", choices=DISTRIBUTIONS, default="uniform",
        help="Disorder distribution",
    )
    parser.add_argument("--seed", type=int, default=0, help="Disorder seed (64-bit)")


def _add_environment_args(parser):
    parser.add_argument("--d", type=float, default=0.0, help=f"Dephasing rate ({RATE_HELP})")
    parser.add_argument(
        "--c", type=float, default=0.0,
        help="Neighbor noise correlation in [-1, 1] (dimensionless)",
    )
    parser.add_argument("--kappa", type=float, default=1.0, help=f"Sink rate ({RATE_HELP})")
    parser.add_argument(
        "--gamma-loss", type=float, default=0.0, help=f"Recombination rate ({RATE_HELP})"
    )


def build_parser():
    """
    Build the argument parser for every subcommand.

    Returns:
        argparse.ArgumentParser: The top-level parser
    """
    parser = _ArgumentParser(
        prog="goldilocks",
        description="Dephasing-assisted transport simulator and Goldilocks calculator",
        allow_abbrev=False,
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    # simulate
    simulate = commands.add_parser("simulate", help="Run one propagation", allow_abbrev=False)
    _add_network_args(simulate)
    _add_environment_args(simulate)
    simulate.add_argument(
        "--sink", type=int, help="Sink site number (1-based; presets default to the last site)"
    )
    simulate.add_argument("--origin", type=int, default=1, help="Initial site number (1-based)")
    simulate.add_argument("--t-max", type=float, default=1e5, help=f"Time cap ({TIME_HELP})")
    simulate.add_argument("--dt", type=float, help=f"RK4 step ({TIME_HELP})")
    simulate.add_argument("--method", choices=METHODS, default="exact", help="Integrator")
    simulate.add_argument(
        "--fit-window", type=float, nargs=2, metavar=("T_LO", "T_HI"),
        help=f"Also export the MSD and fit r(t) on this window ({TIME_HELP})",
    )
    _add_common(simulate, out_default="results/simulate")

    # sweep
    sweep = commands.add_parser("sweep", help="Run a sweep configuration", allow_abbrev=False)
    sweep.add_argument("config", nargs="?", default=DEFAULT_CONFIG_PATH, help="Sweep JSON file")
    sweep.add_argument("--jobs", type=int, help="Worker count (default GOLDILOCKS_THREADS)")
    sweep.add_argument("--stem", default="sweep", help="Result file stem")
    _add_common(sweep, out_default="results/sweep")

    # localize
    localize = commands.add_parser(
        "localize", help="Compare localization estimators", allow_abbrev=False
    )
    _add_network_args(localize)
    localize.add_argument("--origin", type=int, default=1, help="Initial site number (1-based)")
    localize.add_argument(
        "--seeds", type=int, default=1, help="Disorder realizations for presets"
    )
    localize.add_argument(
        "--band", type=int, nargs=2, metavar=("START", "STOP"),
        help="Eigenvalue index range for the IPR average",
    )
    _add_common(localize, out_default="results/localize")

    # theory
    theory = commands.add_parser(
        "theory",
        help="Closed-form estimators",
        description=PRECISION_NOTE,
        allow_abbrev=False,
    )
    estimators = theory.add_subparsers(dest="estimator", required=True)

    def estimator(name, help_text):
        sub = estimators.add_parser(
            name, help=help_text, description=f"{help_text}. {PRECISION_NOTE}", allow_abbrev=False
        )
        _add_common(sub)
        return sub

    p = estimator("lambda", "Lambda = d ell / 2J")
    p.add_argument("--d", type=float, required=True, help=f"Dephasing rate ({RATE_HELP})")
    p.add_argument("--ell", type=float, required=True, help="Localization length (sites)")
    p.add_argument("--J", type=float, required=True, help=f"Coupling ({RATE_HELP})")

    p = estimator("lambda-localized", "Lambda = d / 2 Omega")
    p.add_argument("--d", type=float, required=True, help=f"Dephasing rate ({RATE_HELP})")
    p.add_argument("--omega", type=float, help=f"Omega = sqrt(J^2 + delta^2) ({RATE_HELP})")
    p.add_argument("--J", type=float, help=f"Coupling ({RATE_HELP})")
    p.add_argument("--delta", type=float, default=0.0, help=f"Detuning ({RATE_HELP})")

    p = estimator("micro", "Lambda from microscopic bath parameters")
    _add_bath_args(p)
    p.add_argument("--deltaE", type=float, required=True, help=f"Band splitting ({RATE_HELP})")

    p = estimator("rate", "High-temperature dephasing rate")
    _add_bath_args(p)

    p = estimator("dstar", "Optimal dephasing rate")
    p.add_argument("--J", type=float, required=True, help=f"Coupling ({RATE_HELP})")
    p.add_argument("--ell", type=float, help="Localization length (sites)")
    p.add_argument("--delta-omega", type=float, help=f"Disorder width ({RATE_HELP})")

    p = estimator("ell", "Transient localization length")
    p.add_argument("--J", type=float, required=True, help=f"Coupling ({RATE_HELP})")
    p.add_argument("--delta-omega", type=float, required=True, help=f"Disorder width ({RATE_HELP})")
    p.add_argument("--n", type=float, default=math.inf, help="Site count (default unbounded)")

    p = estimator("tau", "Localization time")
    p.add_argument("--J", type=float, required=True, help=f"Coupling ({RATE_HELP})")
    p.add_argument("--ell", type=float, help="Localization length (sites)")
    p.add_argument("--delta-omega", type=float, help=f"Disorder width ({RATE_HELP})")

    p = estimator("splitting", "Band splitting 2 pi J / ell")
    p.add_argument("--J", type=float, required=True, help=f"Coupling ({RATE_HELP})")
    p.add_argument("--ell", type=float, required=True, help="Localization length (sites)")

    p = estimator("two-state", "Detuned dimer transfer probability")
    p.add_argument("--J", type=float, required=True, help=f"Coupling ({RATE_HELP})")
    p.add_argument("--delta", type=float, required=True, help=f"Half detuning ({RATE_HELP})")

    p = estimator("spread", "Random-walk spread r(t)")
    p.add_argument("--t", type=float, required=True, help=f"Time ({TIME_HELP})")
    p.add_argument("--J", type=float, required=True, help=f"Coupling ({RATE_HELP})")
    p.add_argument("--ell", type=float, help="Localization length (sites)")
    p.add_argument("--omega", type=float, help=f"Localized-regime Omega ({RATE_HELP})")
    p.add_argument("--d", type=float, help=f"Dephasing rate, away from the optimum ({RATE_HELP})")

    # collapse
    collapse = commands.add_parser("collapse", help="Peak/plateau report", allow_abbrev=False)
    collapse.add_argument("results", nargs="+", help="Sweep CSV files")
    collapse.add_argument("--out", help="Output directory for collapse.csv and manifest.json")

    # replay
    replay = commands.add_parser("replay", help="Re-run a manifest", allow_abbrev=False)
    replay.add_argument("manifest", help="manifest.json of a previous run")

    return parser


def _add_bath_args(parser):
    parser.add_argument("--alpha", type=float, default=1.0, help="O(1) prefactor (dimensionless)")
    parser.add_argument("--c", type=float, default=0.0, help="Noise correlation (dimensionless)")
    parser.add_argument(
        "--lambda-reorg", type=float, required=True, help=f"Reorganization energy ({RATE_HELP})"
    )
    parser.add_argument("--kT", type=float, required=True, help=f"Thermal energy ({RATE_HELP})")
    parser.add_argument(
        "--gamma", type=float, required=True, help=f"Bath relaxation rate ({RATE_HELP})"
    )


def _site_index(number, n, flag):
    if number is None:
        return None
    if not 1 <= number <= n:
        raise UsageError(f"{flag} must be a site number in 1..{n}, got {number}")
    return number - 1


def _network_from_args(args, seed=None, sink=None):
    if args.network:
        net = load_network(args.network)
        if sink is not None:
            net = dataclasses.replace(net, sink_site=sink)
        return net
    disorder = DisorderSpec(
        width=_rate(args, args.delta_omega),
        distribution=args.distribution,
        seed=args.seed if seed is None else seed,
    )
    return build_preset(args.preset or "chain", args.n, _rate(args, args.J), disorder, sink)


def _network_size(args):
    return load_network(args.network).n_sites if args.network else args.n


def run_simulate(args, manifest):
    """Run one propagation and write its trajectory and summary."""
    n = _network_size(args)
    sink = _site_index(args.sink, n, "--sink")
    if sink is None and not args.network:
        sink = n - 1
    origin = _site_index(args.origin, n, "--origin")
    net = _network_from_args(args, sink=sink)
    env = OpenSystemSpec(
        dephasing_rate=_rate(args, args.d),
        noise_correlation=args.c,
        sink_rate=_rate(args, args.kappa),
        loss_rate=_rate(args, args.gamma_loss),
    )
    manifest.master_seed = args.seed
    manifest.resolved_config = {
        "n_sites": net.n_sites,
        "topology": net.topology_tag,
        "sink_site": net.sink_site,
        "origin": origin,
        "environment": dataclasses.asdict(env),
        "t_max": args.t_max,
        "dt": args.dt,
        "method": args.method,
    }

    outcome = run_to_completion(
        net, env, localized_state(net.n_sites, origin), args.t_max,
        method=args.method, dt=args.dt,
    )
    out = Path(args.out)
    manifest.outputs.append(export_trajectory(outcome.trajectory, out / "trajectory.csv"))

    summary = {
        "eta": outcome.efficiency,
        "loss": outcome.loss,
        "residual": outcome.residual,
        "transfer_time": outcome.transfer_time,
        "completion_time": outcome.completion_time,
        "converged": outcome.converged,
        "method": outcome.method,
        "warnings": outcome.warnings,
    }

    if args.fit_window:
        series = msd_curve(outcome.trajectory, origin)
        manifest.outputs.append(export_msd(series, out / "msd.csv"))
        fit = fit_diffusion(series, tuple(args.fit_window))
        summary["diffusion_exponent"] = fit.exponent
        summary["diffusion_coefficient"] = fit.coefficient

    manifest.outputs.append(write_json(out / "summary.json", summary))

    print(f"eta = {outcome.efficiency:.6f}")
    print(f"loss = {outcome.loss:.6f}")
    print(f"residual = {outcome.residual:.3g}")
    print(f"transfer_time = {outcome.transfer_time:.6g} ps")
    print(f"converged = {outcome.converged}")
    return EXIT_OK


def run_sweep_command(args, manifest):
    """Run a sweep configuration file."""
    cfg = load_sweep_config(args.config)
    if cfg is None:
        return EXIT_USAGE
    manifest.master_seed = cfg.master_seed
    manifest.resolved_config = config_to_dict(cfg)

    result = run_sweep(cfg, n_jobs=args.jobs)
    manifest.outputs.extend(write_sweep(result, args.out, stem=args.stem))

    flagged = sum(1 for p in result.points if p.flags)
    print(f"points = {len(result.points)}")
    print(f"flagged = {flagged}")
    return EXIT_OK


def _mean(rows, key):
    values = np.array([row[key] for row in rows], dtype=float)
    return float(np.nanmean(values)) if np.any(np.isfinite(values)) else math.nan


def run_localize(args, manifest):
    """Compare the three localization estimators, per seed and on average."""
    n = _network_size(args)
    origin = _site_index(args.origin, n, "--origin")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = [args.seed] if args.network else [
        derive_seed(args.seed, (), k) for k in range(args.seeds)
    ]
    manifest.master_seed = args.seed
    manifest.resolved_config = {"n_sites": n, "origin": origin, "seeds": seeds}

    band = tuple(args.band) if args.band else None
    delta_omega = None if args.network else _rate(args, args.delta_omega)
    rows = []
    for seed in seeds:
        net = _network_from_args(args, seed=seed)
        estimate = localization_report(net, origin, delta_omega=delta_omega, band=band)
        rows.append({"seed": seed, **dataclasses.asdict(estimate)})

    manifest.outputs.append(export_localization(rows, Path(args.out) / "localization.csv"))

    capped = sum(1 for row in rows if row["capped"])
    print("ell_theory ell_ipr ell_dynamic tau capped")
    print(
        f"{_mean(rows, 'ell_theory'):.3f} {_mean(rows, 'ell_ipr'):.3f} "
        f"{_mean(rows, 'ell_dynamic'):.3f} {_mean(rows, 'tau'):.3f} {capped}/{len(rows)}"
    )
    return EXIT_OK


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def run_theory(args, manifest):
    """Print one closed-form estimator."""
    name = args.estimator

    def rate(value):
        return _rate(args, value)

    def shown(value):
        return from_rad_ps(value, args.unit)

    manifest.resolved_config = {
        key: value for key, value in vars(args).items() if key not in ("command", "out")
    }

    if name == "lambda":
        _print_value(lambda_param(rate(args.d), args.ell, rate(args.J)))
    elif name == "lambda-localized":
        if args.omega is not None:
            _print_value(lambda_localized(rate(args.d), rate(args.omega), 0.0))
        else:
            J = _require(args.J, "--J or --omega")
            _print_value(lambda_localized(rate(args.d), rate(J), rate(args.delta)))
    elif name in ("micro", "rate"):
        if name == "micro":
            params = MicroParams(
                alpha=args.alpha, c=args.c, lambda_reorg=rate(args.lambda_reorg),
                kT=rate(args.kT), gamma=rate(args.gamma), deltaE=rate(args.deltaE),
            )
            _print_value(lambda_micro(params))
        else:
            value = decoherence_rate(
                args.alpha, args.c, rate(args.lambda_reorg), rate(args.kT), rate(args.gamma)
            )
            _print_value(shown(value))
    elif name == "dstar":
        if args.ell is not None:
            value = optimal_dephasing(rate(args.J), args.ell)
        else:
            delta = _require(args.delta_omega, "--ell or --delta-omega")
            value = optimal_dephasing_from_disorder(rate(args.J), rate(delta))
        _print_value(shown(value))
    elif name == "ell":
        _print_value(theory_localization(rate(args.J), rate(args.delta_omega), args.n))
    elif name == "tau":
        if args.ell is not None:
            _print_value(localization_time(rate(args.J), args.ell))
        else:
            delta = _require(args.delta_omega, "--ell or --delta-omega")
            _print_value(localization_time_from_disorder(rate(args.J), rate(delta)))
    elif name == "splitting":
        _print_value(shown(band_splitting(rate(args.J), args.ell)))
    elif name == "two-state":
        result = two_state(rate(args.J), rate(args.delta))
        print(f"p_max = {result.p_max:.3f}")
        print(f"omega = {shown(result.omega):.3f}")
        print(f"t_peak = {result.t_peak:.3f} ps")
    elif name == "spread":
        J = rate(args.J)
        if args.omega is not None:
            _print_value(localized_spread(args.t, J, rate(args.omega)))
        else:
            ell = _require(args.ell, "--ell or --omega")
            if args.d is not None:
                _print_value(regime_spread(args.t, rate(args.d), J, ell))
            else:
                _print_value(optimal_spread(args.t, J, ell))
    return EXIT_OK


def run_collapse(args, manifest):
    """Report peak Lambda and plateau width of every family in the given sweeps."""
    results = [read_sweep(path) for path in args.results]
    manifest.resolved_config = {"results": list(args.results)}
    reports = collapse_check(results)

    print("family peak_lambda peak_d eta_max plateau_lo plateau_hi decades unconverged")
    for r in reports:
        print(
            f"{r.label} {r.peak_lambda:.3f} {r.peak_d:.4g} {r.eta_max:.3f} "
            f"{r.plateau[0]:.3f} {r.plateau[1]:.3f} {r.plateau_decades:.2f} "
            f"{int(r.unconverged)}"
        )

    if args.out:
        manifest.outputs.append(export_collapse(reports, Path(args.out) / "collapse.csv"))
    return EXIT_OK


HANDLERS = {
    "simulate": run_simulate,
    "sweep": run_sweep_command,
    "localize": run_localize,
    "theory": run_theory,
    "collapse": run_collapse,
}


def _configure_logging(verbose=False):
    level = logging.DEBUG if verbose else getattr(logging, get_log_level(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


def _replay(args):
    recorded = read_json(args.manifest)
    argv = recorded.get("argv")
    if not argv or argv[0] == "replay":
        raise UsageError(f"{args.manifest} does not record a replayable command")
    logger.info(f"Replaying: {' '.join(argv)}")
    return cli_run(argv)


def cli_run(argv=None):
    """
    Run one CLI command.

    Args:
        argv (list): Arguments without the program name; sys.argv[1:] if omitted

    Returns:
        int: 0 on success, 1 on usage/schema/budget errors, 2 on numerical failure
    """
    argv = list(sys.argv[1:] if argv is None else argv)

    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    _configure_logging(args.verbose)

    if args.command == "replay":
        try:
            return _replay(args)
        except (GoldilocksError, OSError, ValueError) as e:
            logger.error(f"Replay failed: {str(e)}")
            print(str(e), file=sys.stderr)
            return EXIT_USAGE

    manifest = RunManifest(command=args.command, argv=argv, started_at=_now())
    try:
        exit_code = HANDLERS[args.command](args, manifest)
        manifest.status = "ok" if exit_code == EXIT_OK else "error"
    except NumericalFailure as e:
        logger.error(f"Numerical failure: {str(e)}")
        print(str(e), file=sys.stderr)
        manifest.status, manifest.error = "error", str(e)
        exit_code = EXIT_NUMERICAL
    except (GoldilocksError, OSError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(str(e), file=sys.stderr)
        manifest.status, manifest.error = "error", str(e)
        exit_code = EXIT_USAGE

    manifest.exit_code = exit_code
    manifest.finished_at = _now()
    if getattr(args, "out", None):
        write_json(Path(args.out) / MANIFEST_NAME, dataclasses.asdict(manifest))
    return exit_code


def main():
    """Console entry point."""
    sys.exit(cli_run())


if __name__ == "__main__":
    main()
