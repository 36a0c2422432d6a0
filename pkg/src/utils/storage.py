"""
Result Storage

This module writes and reads the CSV and JSON files produced by simulations,
sweeps and CLI runs. CSV output uses "." decimals, LF line endings and a fixed
column order, so equal results give byte-identical files.
"""

import csv
import json
import logging
import math
from pathlib import Path

logger = logging.getLogger(__name__)

# Significant digits written for floating-point values
FLOAT_DIGITS = 12


def format_value(value):
    """
    Render a value for CSV output.

    Args:
        value: float, int, bool, str or None

    Returns:
        str: Deterministic text form ("" for None)
    """
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float) or hasattr(value, "dtype"):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        # Normalize negative zero
        return f"{value + 0.0:.{FLOAT_DIGITS}g}"
    return str(value)


def _prepare(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path, header, rows):
    """
    Write rows under a header row.

    Args:
        path (str or Path): Destination file
        header (list): Column names
        rows (iterable): Sequences of values in header order

    Returns:
        str: The written path
    """
    path = _prepare(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])
    logger.info(f"Wrote {path}")
    return str(path)


def read_csv(path):
    """
    Read a CSV file written by write_csv.

    Returns:
        tuple: (header list, list of row dicts with string values)
    """
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def write_json(path, data):
    """Write a JSON document with sorted keys and a trailing newline."""
    path = _prepare(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")
    return str(path)


def read_json(path):
    """Read a JSON document."""
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_trajectory_csv(traj, path):
    """
    Write a trajectory as (time, p_1..p_n, sink, loss).

    Args:
        traj (Trajectory): Trajectory to export
        path (str or Path): Destination file

    Returns:
        str: The written path
    """
    populations = traj.populations
    n = populations.shape[1]
    header = ["time"] + [f"p_{i + 1}" for i in range(n)] + ["sink", "loss"]
    rows = (
        [t, *populations[k], traj.sink_population[k], traj.loss_population[k]]
        for k, t in enumerate(traj.times)
    )
    return write_csv(path, header, rows)


def write_msd_csv(series, path):
    """Write an MSD series of (t, r) pairs."""
    return write_csv(path, ["time", "r"], ([t, r] for t, r in series))


def write_localization_csv(rows, path):
    """
    Write per-seed localization estimates.

    Args:
        rows (list): Dicts with keys seed, ell_theory, ell_ipr, ell_dynamic, tau, capped
        path (str or Path): Destination file
    """
    header = ["seed", "ell_theory", "ell_ipr", "ell_dynamic", "tau", "capped"]
    return write_csv(path, header, ([row.get(k) for k in header] for row in rows))
