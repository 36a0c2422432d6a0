"""
Network Service

This module builds excitonic site networks (chains, rings, user files), draws
static energetic disorder, and assembles the tight-binding Hamiltonian.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from src.utils.errors import InvalidArgumentError, SchemaError
from src.utils.units import from_rad_ps, normalize_unit, to_rad_ps

logger = logging.getLogger(__name__)

PRESET_KINDS = ("chain", "ring")
TOPOLOGY_TAGS = ("chain", "ring", "custom")
DISTRIBUTIONS = ("uniform", "gaussian")

# Relative tolerance for the coupling-matrix symmetry check on file input
SYMMETRY_RTOL = 1e-12


@dataclass(frozen=True)
class DisorderSpec:
    """Static site-energy disorder of scale `width` (rad/ps)."""

    width: float = 0.0
    distribution: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.width) or self.width < 0:
            raise InvalidArgumentError(
                f"Disorder width must be finite and >= 0, got {self.width}"
            )
        if self.distribution not in DISTRIBUTIONS:
            raise InvalidArgumentError(
                f"Unknown disorder distribution: {self.distribution!r}"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgumentError("Seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class SiteNetwork:
    """
    Sites with positions, on-site energies and a symmetric coupling matrix.

    positions has shape (n_sites, dim) in units of the lattice spacing;
    site_energies and couplings are in rad/ps.
    """

    n_sites: int
    positions: np.ndarray
    site_energies: np.ndarray
    couplings: np.ndarray
    sink_site: Optional[int] = None
    topology_tag: str = "custom"

    def __post_init__(self):
        validate_network(self)


def validate_network(net):
    """
    Check the SiteNetwork invariants.

    Args:
        net (SiteNetwork): Network to check

    Raises:
        InvalidArgumentError: If any invariant is violated
    """
    n = net.n_sites
    if n < 2:
        raise InvalidArgumentError(f"A network needs at least 2 sites, got {n}")
    if net.topology_tag not in TOPOLOGY_TAGS:
        raise InvalidArgumentError(f"Unknown topology tag: {net.topology_tag!r}")
    if net.site_energies.shape != (n,):
        raise InvalidArgumentError("site_energies must have one entry per site")
    if not np.all(np.isfinite(net.site_energies)):
        raise InvalidArgumentError("site_energies must be finite")
    if net.couplings.shape != (n, n):
        raise InvalidArgumentError("couplings must be an n_sites x n_sites matrix")
    if not np.all(np.isfinite(net.couplings)):
        raise InvalidArgumentError("couplings must be finite")
    if np.any(np.diag(net.couplings) != 0):
        raise InvalidArgumentError("couplings must have a zero diagonal")
    if not np.array_equal(net.couplings, net.couplings.T):
        raise InvalidArgumentError("couplings must be symmetric")
    if net.positions.ndim != 2 or net.positions.shape[0] != n:
        raise InvalidArgumentError("positions must have shape (n_sites, dim)")
    if net.sink_site is not None and not 0 <= net.sink_site < n:
        raise InvalidArgumentError(f"sink_site {net.sink_site} is out of range")


def draw_site_energies(n, disorder):
    """
    Draw static site energies centered at zero.

    A fresh generator is seeded from the spec on every call, so equal specs
    give bit-identical energies.

    Args:
        n (int): Number of sites
        disorder (DisorderSpec): Disorder scale, distribution and seed

    Returns:
        np.ndarray: Site energies in rad/ps
    """
    if disorder.width == 0:
        return np.zeros(n)

    rng = np.random.default_rng(int(disorder.seed))
    if disorder.distribution == "gaussian":
        return rng.normal(0.0, disorder.width, size=n)
    return rng.uniform(-disorder.width, disorder.width, size=n)


def chain_positions(n):
    """Integer positions 0..n-1 on a line."""
    return np.arange(n, dtype=float).reshape(n, 1)


def ring_positions(n):
    """Positions on a circle whose neighboring sites are one spacing apart."""
    radius = 1.0 / (2.0 * math.sin(math.pi / n))
    angles = 2.0 * math.pi * np.arange(n) / n
    return np.column_stack([radius * np.cos(angles), radius * np.sin(angles)])


def build_preset(kind, n, J, disorder=None, sink_site=None):
    """
    Build a nearest-neighbor chain or ring.

    Args:
        kind (str): "chain" or "ring"
        n (int): Number of sites (>= 2)
        J (float): Nearest-neighbor coupling in rad/ps (> 0)
        disorder (DisorderSpec): Site-energy disorder; none when omitted
        sink_site (int): Index of the trapping site, if any

    Returns:
        SiteNetwork: The preset network
    """
    if kind not in PRESET_KINDS:
        raise InvalidArgumentError(f"Unknown preset kind: {kind!r}")
    if int(n) != n or n < 2:
        raise InvalidArgumentError(f"Preset needs an integer n >= 2, got {n}")
    if not math.isfinite(J) or J <= 0:
        raise InvalidArgumentError(f"Coupling J must be positive, got {J}")

    n = int(n)
    disorder = disorder or DisorderSpec()

    couplings = np.zeros((n, n))
    for i in range(n - 1):
        couplings[i, i + 1] = couplings[i + 1, i] = J
    if kind == "ring":
        couplings[0, n - 1] = couplings[n - 1, 0] = J
        positions = ring_positions(n)
    else:
        positions = chain_positions(n)

    net = SiteNetwork(
        n_sites=n,
        positions=positions,
        site_energies=draw_site_energies(n, disorder),
        couplings=couplings,
        sink_site=sink_site,
        topology_tag=kind,
    )
    logger.debug(
        f"Built {kind} with {n} sites, J={J}, disorder width={disorder.width}, "
        f"seed={disorder.seed}"
    )
    return net


def _line_of(text, key):
    """Return the 1-based line on which a JSON key first appears, if any."""
    marker = f'"{key}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if marker in line:
            return number
    return None


def _as_float_array(value, field, text):
    try:
        array = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(
            "Expected numbers", field=field, line=_line_of(text, field)
        ) from None
    if not np.all(np.isfinite(array)):
        raise SchemaError(
            "Values must be finite", field=field, line=_line_of(text, field)
        )
    return array


def parse_network(text, source="<string>"):
    """
    Parse a network document.

    Schema: `unit` ("cm-1" | "rad/ps"), `energies` (array), `couplings`
    (full square matrix), optional `positions` (array or array of
    coordinate arrays), optional `sink_site` (0-based index).

    Args:
        text (str): JSON document
        source (str): Name used in log messages

    Returns:
        SiteNetwork: Network in rad/ps

    Raises:
        SchemaError: On parse failure or schema violation
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"Invalid JSON: {e.msg}", line=e.lineno) from None

    if not isinstance(document, dict):
        raise SchemaError("Network file must contain a JSON object", line=1)

    for key in ("unit", "energies", "couplings"):
        if key not in document:
            raise SchemaError("Missing required field", field=key)

    try:
        unit = normalize_unit(document["unit"])
    except InvalidArgumentError:
        raise SchemaError(
            f"Unknown unit tag {document['unit']!r}",
            field="unit",
            line=_line_of(text, "unit"),
        ) from None

    energies = _as_float_array(document["energies"], "energies", text)
    if energies.ndim != 1 or energies.size < 2:
        raise SchemaError(
            "energies must be a flat array of at least 2 values",
            field="energies",
            line=_line_of(text, "energies"),
        )
    n = energies.size

    couplings = _as_float_array(document["couplings"], "couplings", text)
    if couplings.shape != (n, n):
        raise SchemaError(
            f"couplings must be a {n}x{n} matrix",
            field="couplings",
            line=_line_of(text, "couplings"),
        )
    if np.any(np.diag(couplings) != 0):
        i = int(np.flatnonzero(np.diag(couplings))[0])
        raise SchemaError(
            "Coupling matrix must have a zero diagonal",
            field=f"couplings[{i}][{i}]",
            line=_line_of(text, "couplings"),
        )
    scale = SYMMETRY_RTOL * max(1.0, float(np.max(np.abs(couplings))))
    asymmetric = np.argwhere(np.abs(couplings - couplings.T) > scale)
    if asymmetric.size:
        i, j = (int(k) for k in asymmetric[0])
        raise SchemaError(
            f"Coupling matrix is not symmetric: J[{i}][{j}] != J[{j}][{i}]",
            field=f"couplings[{i}][{j}]",
            line=_line_of(text, "couplings"),
        )
    couplings = 0.5 * (couplings + couplings.T)

    if "positions" in document:
        positions = _as_float_array(document["positions"], "positions", text)
        if positions.ndim == 1:
            positions = positions.reshape(-1, 1)
        if positions.ndim != 2 or positions.shape[0] != n:
            raise SchemaError(
                f"positions must list one coordinate per site ({n})",
                field="positions",
                line=_line_of(text, "positions"),
            )
    else:
        positions = chain_positions(n)

    sink_site = document.get("sink_site")
    if sink_site is not None and (
        not isinstance(sink_site, int) or isinstance(sink_site, bool)
        or not 0 <= sink_site < n
    ):
        raise SchemaError(
            f"sink_site must be an integer index in [0, {n - 1}]",
            field="sink_site",
            line=_line_of(text, "sink_site"),
        )

    net = SiteNetwork(
        n_sites=n,
        positions=positions,
        site_energies=to_rad_ps(energies, unit),
        couplings=to_rad_ps(couplings, unit),
        sink_site=sink_site,
        topology_tag="custom",
    )
    logger.info(f"Loaded network with {n} sites from {source} (unit {unit})")
    return net


def load_network(path):
    """
    Load a network file.

    Args:
        path (str or Path): Path to a JSON network file

    Returns:
        SiteNetwork: Network in rad/ps

    Raises:
        SchemaError: If the file is missing, unparsable or violates the schema
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"Network file not found: {path}")

    return parse_network(path.read_text(), source=str(path))


def save_network(net, path, unit="rad/ps"):
    """
    Write a network in the schema accepted by load_network.

    Args:
        net (SiteNetwork): Network to write
        path (str or Path): Destination file
        unit (str): Unit for energies and couplings in the file
    """
    unit = normalize_unit(unit)
    positions = net.positions
    document = {
        "unit": unit,
        "energies": from_rad_ps(net.site_energies, unit).tolist(),
        "couplings": from_rad_ps(net.couplings, unit).tolist(),
        "positions": (
            positions[:, 0].tolist() if positions.shape[1] == 1 else positions.tolist()
        ),
    }
    if net.sink_site is not None:
        document["sink_site"] = net.sink_site

    Path(path).write_text(json.dumps(document, indent=2) + "\n")
    logger.info(f"Wrote network with {net.n_sites} sites to {path}")


def hamiltonian(net):
    """
    Assemble the tight-binding Hamiltonian.

    Args:
        net (SiteNetwork): Network

    Returns:
        np.ndarray: Real symmetric (Hermitian) matrix in rad/ps
    """
    return np.diag(net.site_energies) + net.couplings


def nominal_coupling(net):
    """
    Average magnitude of the non-zero couplings.

    For chain and ring presets this is exactly the J they were built with.

    Args:
        net (SiteNetwork): Network

    Returns:
        float: Coupling scale in rad/ps, 0 for an uncoupled network
    """
    upper = np.abs(net.couplings[np.triu_indices(net.n_sites, k=1)])
    nonzero = upper[upper > 0]
    return float(nonzero.mean()) if nonzero.size else 0.0


def localized_state(n, site):
    """
    Density matrix with the excitation on a single site.

    Args:
        n (int): Number of sites
        site (int): 0-based site index

    Returns:
        np.ndarray: Complex n x n matrix |site><site|
    """
    if not 0 <= site < n:
        raise InvalidArgumentError(f"Site {site} is out of range for {n} sites")
    rho = np.zeros((n, n), dtype=complex)
    rho[site, site] = 1.0
    return rho
