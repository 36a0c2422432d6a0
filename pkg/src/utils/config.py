"""
Configuration Utility

This module handles loading and validating sweep configuration files and the
environment settings that tune execution (parallelism, budget, log level).
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from src.utils.errors import InvalidArgumentError, SchemaError
from src.utils.units import normalize_unit, unit_factor

load_dotenv()

logger = logging.getLogger(__name__)

# Default configuration file path
DEFAULT_CONFIG_PATH = "config.json"

DEFAULT_THREADS = 0
DEFAULT_BUDGET = 100_000
DEFAULT_LOG_LEVEL = "INFO"

# Grid axes and whether their values are energies/rates subject to unit conversion
GRID_AXES = {
    "d": True,
    "c": False,
    "kappa": True,
    "gamma_loss": True,
    "J": True,
    "delta_omega": True,
}
# Axes that change the network (and therefore the disorder draws)
NETWORK_AXES = ("J", "delta_omega")
OUTPUTS = ("eta", "transfer_time", "diffusion")

DEFAULT_GLOBAL_SETTINGS = {
    "realizations": 1,
    "master_seed": 0,
    "t_max": 100_000.0,
    "dt": None,
    "method": "exact",
    "outputs": ["eta", "transfer_time"],
    "diffusion_window": None,
    "budget": None,
    "initial_site": 0,
}


def get_thread_count():
    """
    Sweep parallelism from GOLDILOCKS_THREADS (0 = all cores).

    Returns:
        int: A joblib n_jobs value (-1 for all cores)
    """
    raw = os.getenv("GOLDILOCKS_THREADS", str(DEFAULT_THREADS))
    try:
        threads = int(raw)
    except ValueError:
        logger.warning(f"Ignoring invalid GOLDILOCKS_THREADS={raw!r}")
        threads = DEFAULT_THREADS
    return -1 if threads <= 0 else threads


def get_budget():
    """Default propagation budget from GOLDILOCKS_BUDGET."""
    raw = os.getenv("GOLDILOCKS_BUDGET", str(DEFAULT_BUDGET))
    try:
        return int(float(raw))
    except ValueError:
        logger.warning(f"Ignoring invalid GOLDILOCKS_BUDGET={raw!r}")
        return DEFAULT_BUDGET


def get_log_level():
    """Log level name from GOLDILOCKS_LOG_LEVEL."""
    return os.getenv("GOLDILOCKS_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()


@dataclass(frozen=True)
class SweepConfig:
    """
    A seeded, disorder-averaged parameter sweep.

    Energies and rates are in rad/ps; site indices are 0-based.
    """

    preset: str = "chain"
    n_sites: int = 8
    J: float = 1.0
    disorder_width: float = 0.0
    distribution: str = "uniform"
    sink_site: Optional[int] = None
    initial_site: int = 0
    d: float = 0.0
    c: float = 0.0
    kappa: float = 1.0
    gamma_loss: Optional[float] = None
    grid: Tuple[Tuple[str, Tuple[float, ...]], ...] = (("d", (0.0,)),)
    realizations: int = 1
    master_seed: int = 0
    t_max: float = 100_000.0
    dt: Optional[float] = None
    method: str = "exact"
    outputs: Tuple[str, ...] = ("eta", "transfer_time")
    diffusion_window: Optional[Tuple[float, float]] = None
    budget: Optional[int] = None

    def __post_init__(self):
        if self.realizations < 1:
            raise InvalidArgumentError("realizations must be >= 1")
        if not self.grid:
            raise InvalidArgumentError("A sweep needs at least one grid axis")
        for name, values in self.grid:
            if name not in GRID_AXES:
                raise InvalidArgumentError(f"Unknown grid axis: {name!r}")
            if not values:
                raise InvalidArgumentError(f"Grid axis {name!r} is empty")
        if len({name for name, _ in self.grid}) != len(self.grid):
            raise InvalidArgumentError("Grid axes must be unique")
        for output in self.outputs:
            if output not in OUTPUTS:
                raise InvalidArgumentError(f"Unknown output: {output!r}")
        if "diffusion" in self.outputs and self.diffusion_window is None:
            raise InvalidArgumentError("The diffusion output needs a diffusion_window")
        if not 0 <= int(self.master_seed) < 2**64:
            raise InvalidArgumentError("master_seed must be a 64-bit unsigned integer")

    @property
    def sink(self):
        """Sink site index, defaulting to the last site."""
        return self.n_sites - 1 if self.sink_site is None else self.sink_site

    @property
    def point_count(self):
        """Number of grid points."""
        return int(np.prod([len(values) for _, values in self.grid]))

    @property
    def propagation_count(self):
        """Total number of propagations the sweep will run."""
        return self.point_count * self.realizations


def config_to_dict(config):
    """Plain JSON-compatible form of a SweepConfig."""
    data = asdict(config)
    data["grid"] = {name: list(values) for name, values in config.grid}
    data["outputs"] = list(config.outputs)
    if config.diffusion_window is not None:
        data["diffusion_window"] = list(config.diffusion_window)
    return data


def config_hash(config):
    """SHA-256 of the canonical JSON form of a SweepConfig."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config_from_file(config_path=DEFAULT_CONFIG_PATH):
    """
    Load configuration from a local JSON file.

    Args:
        config_path (str): Path to the configuration file

    Returns:
        dict: Configuration data or None if an error occurs
    """
    try:
        config_path = Path(config_path)
        if not config_path.exists():
            logger.error(f"Configuration file not found: {config_path}")
            return None

        with open(config_path, "r") as f:
            config = json.load(f)

        return config

    except json.JSONDecodeError as e:
        logger.error(f"Error parsing configuration file (line {e.lineno}): {e.msg}")
        return None
    except Exception as e:
        logger.error(f"Error loading configuration from file: {str(e)}")
        return None


def validate_config(config):
    """
    Validate the structure of a sweep configuration document.

    Args:
        config (dict): Configuration data to validate

    Returns:
        bool: True if valid, False otherwise
    """
    if not config:
        logger.error("Configuration is empty")
        return False

    # Check for required top-level keys
    required_keys = ["network", "grid"]
    for key in required_keys:
        if key not in config:
            logger.error(f"Missing required configuration key: {key}")
            return False

    network = config["network"]
    if not isinstance(network, dict):
        logger.error("Network configuration must be an object")
        return False
    for key in ("preset", "n", "J"):
        if key not in network:
            logger.error(f"Network configuration is missing required field: {key}")
            return False

    # Check that grid is a non-empty object of known axes
    if not isinstance(config["grid"], dict) or not config["grid"]:
        logger.error("Grid configuration must be a non-empty object")
        return False
    for axis, spec in config["grid"].items():
        if axis not in GRID_AXES:
            logger.error(f"Unknown grid axis: {axis}")
            return False
        if not isinstance(spec, dict) or not (
            "values" in spec or {"start", "stop", "num"} <= set(spec)
        ):
            logger.error(
                f"Grid axis {axis} needs 'values' or 'start', 'stop' and 'num'"
            )
            return False

    for key in config.get("global_settings", {}):
        if key not in DEFAULT_GLOBAL_SETTINGS:
            logger.error(f"Unknown global setting: {key}")
            return False

    return True


def axis_values(spec):
    """
    Expand a grid axis specification into explicit values.

    Args:
        spec (dict): {"values": [...]} or {"start", "stop", "num", "spacing"}

    Returns:
        tuple: Axis values as floats
    """
    if "values" in spec:
        values = [float(v) for v in spec["values"]]
    else:
        start, stop, num = float(spec["start"]), float(spec["stop"]), int(spec["num"])
        spacing = spec.get("spacing", "linear")
        if spacing == "log":
            if start <= 0 or stop <= 0:
                raise SchemaError("Log-spaced axes need positive bounds", field="grid")
            values = np.logspace(math.log10(start), math.log10(stop), num).tolist()
        elif spacing == "linear":
            values = np.linspace(start, stop, num).tolist()
        else:
            raise SchemaError(f"Unknown spacing {spacing!r}", field="grid")
    if not values or not all(math.isfinite(v) for v in values):
        raise SchemaError("Grid axes need finite values", field="grid")
    return tuple(values)


def parse_sweep_config(document):
    """
    Build a SweepConfig from a validated configuration document.

    Args:
        document (dict): Configuration data

    Returns:
        SweepConfig: The sweep, with every energy/rate converted to rad/ps

    Raises:
        SchemaError: If a field has the wrong type or value
    """
    try:
        factor = unit_factor(normalize_unit(document.get("unit", "rad/ps")))
    except InvalidArgumentError:
        raise SchemaError(f"Unknown unit tag {document.get('unit')!r}", field="unit") from None

    network = document["network"]
    disorder = document.get("disorder", {})
    environment = document.get("environment", {})
    settings = {**DEFAULT_GLOBAL_SETTINGS, **document.get("global_settings", {})}

    try:
        grid = tuple(
            (axis, tuple(v * factor if GRID_AXES[axis] else v for v in axis_values(spec)))
            for axis, spec in document["grid"].items()
        )
        J = float(network["J"]) * factor
        gamma_loss = environment.get("gamma_loss")
        window = settings["diffusion_window"]
        config = SweepConfig(
            preset=network["preset"],
            n_sites=int(network["n"]),
            J=J,
            disorder_width=float(disorder.get("width", 0.0)) * factor,
            distribution=disorder.get("distribution", "uniform"),
            sink_site=network.get("sink_site"),
            initial_site=int(network.get("initial_site", settings["initial_site"])),
            d=float(environment.get("d", 0.0)) * factor,
            c=float(environment.get("c", 0.0)),
            kappa=float(environment.get("kappa", 1.0)) * factor,
            gamma_loss=None if gamma_loss is None else float(gamma_loss) * factor,
            grid=grid,
            realizations=int(settings["realizations"]),
            master_seed=int(settings["master_seed"]),
            t_max=float(settings["t_max"]),
            dt=None if settings["dt"] is None else float(settings["dt"]),
            method=settings["method"],
            outputs=tuple(settings["outputs"]),
            diffusion_window=None if window is None else (float(window[0]), float(window[1])),
            budget=None if settings["budget"] is None else int(settings["budget"]),
        )
    except (InvalidArgumentError, KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"Invalid sweep configuration: {str(e)}") from None

    return config


def load_sweep_config(config_path=DEFAULT_CONFIG_PATH):
    """
    Load, validate and parse a sweep configuration file.

    Args:
        config_path (str): Path to the configuration file

    Returns:
        SweepConfig: Parsed configuration or None if loading or validation fails
    """
    config = load_config_from_file(config_path)
    if not config or not validate_config(config):
        return None

    try:
        return parse_sweep_config(config)
    except SchemaError as e:
        logger.error(f"Error in configuration file {config_path}: {str(e)}")
        return None
