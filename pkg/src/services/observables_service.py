"""
Observables Service

This module extracts transport diagnostics from trajectories and Hamiltonians:
mean-squared displacement, diffusion fits, population relaxation rates and
localization-length estimators.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import curve_fit

from src.services.dynamics_service import OpenSystemSpec, propagate
from src.services.network_service import (
    hamiltonian,
    localized_state,
    nominal_coupling,
)
from src.services.theory_service import theory_localization
from src.utils.errors import InvalidArgumentError
from src.utils.storage import write_localization_csv, write_msd_csv

logger = logging.getLogger(__name__)

# Minimum population for a snapshot to enter the MSD
MIN_TRACE = 1e-9
MIN_FIT_POINTS = 10

# Plateau detector settings, reported with every dynamic estimate
PLATEAU_HORIZON = 50.0
PLATEAU_SLOPE = 0.1
PLATEAU_FRACTION = 0.9
# A plateau above this share of the uniform-spread RMS is finite-size saturation
SATURATION_SHARE = 0.5


@dataclass(frozen=True)
class DiffusionFit:
    """Power-law fit r(t) = coefficient * t**exponent on a time window."""

    exponent: float
    coefficient: float
    window: Tuple[float, float]
    residual: float
    n_points: int

    def __post_init__(self):
        if not self.window[0] < self.window[1]:
            raise InvalidArgumentError("Fit window must satisfy t_lo < t_hi")
        if self.residual < 0:
            raise InvalidArgumentError("Fit residual must be >= 0")

    @property
    def diffusion_constant(self):
        """D = coefficient**2 / 2, meaningful when the exponent is 1/2."""
        return 0.5 * self.coefficient**2


@dataclass
class LocalizationEstimate:
    """Side-by-side localization lengths (sites) and localization time (ps)."""

    ell_theory: Optional[float] = None
    ell_ipr: Optional[float] = None
    ell_dynamic: Optional[float] = None
    tau: Optional[float] = None
    capped: bool = False
    plateau_window: Optional[Tuple[float, float]] = None
    plateau_slope: Optional[float] = None
    slope_threshold: float = PLATEAU_SLOPE


def displacements(positions, origin):
    """Euclidean distance of every site from the origin site."""
    if not 0 <= origin < len(positions):
        raise InvalidArgumentError(f"Origin site {origin} is out of range")
    return np.sqrt(((positions - positions[origin]) ** 2).sum(axis=1))


def msd_curve(traj, origin):
    """
    Root-mean-square displacement of the loss-renormalized population.

    r(t) = sqrt( sum_i |x_i - x_origin|^2 rho_ii(t) / Tr rho(t) )

    Args:
        traj (Trajectory): Trajectory with site positions
        origin (int): 0-based origin site

    Returns:
        np.ndarray: Shape (m, 2) array of (t, r); truncated before the first
        snapshot whose trace has vanished
    """
    distance_sq = displacements(traj.positions, origin) ** 2
    populations = traj.populations
    trace = populations.sum(axis=1)

    invalid = np.flatnonzero(trace <= MIN_TRACE)
    stop = int(invalid[0]) if invalid.size else len(trace)
    if stop < len(trace):
        logger.debug(f"Population vanished at t={traj.times[stop]:.6g} ps")

    msd = populations[:stop] @ distance_sq / trace[:stop]
    r = np.sqrt(np.clip(msd, 0.0, None))
    return np.column_stack([traj.times[:stop], r])


def _window_points(series, window):
    t_lo, t_hi = window
    if not t_lo < t_hi:
        raise InvalidArgumentError(f"Fit window must satisfy t_lo < t_hi, got {window}")
    series = np.asarray(series, dtype=float)
    mask = (series[:, 0] >= t_lo) & (series[:, 0] <= t_hi)
    t, r = series[mask, 0], series[mask, 1]
    if t.size < MIN_FIT_POINTS:
        raise InvalidArgumentError(
            f"Need at least {MIN_FIT_POINTS} points in window {window}, got {t.size}"
        )
    if np.any(t <= 0) or np.any(r <= 0):
        raise InvalidArgumentError("Power-law fit needs t > 0 and r > 0 in the window")
    return t, r


def fit_diffusion(series, window, exponent=None):
    """
    Least-squares fit of log r against log t.

    Args:
        series (array): (t, r) pairs
        window (tuple): (t_lo, t_hi) in ps
        exponent (float): Hold the exponent fixed and fit only the coefficient

    Returns:
        DiffusionFit: exponent, coefficient = exp(intercept), RMS log residual
    """
    t, r = _window_points(series, window)
    log_t, log_r = np.log(t), np.log(r)

    if exponent is None:
        slope, intercept = np.polyfit(log_t, log_r, 1)
    else:
        slope = float(exponent)
        intercept = float(np.mean(log_r - slope * log_t))

    residual = float(np.sqrt(np.mean((log_r - (slope * log_t + intercept)) ** 2)))
    return DiffusionFit(
        exponent=float(slope),
        coefficient=float(math.exp(intercept)),
        window=(float(window[0]), float(window[1])),
        residual=residual,
        n_points=int(t.size),
    )


def fit_relaxation_rate(traj, site=0, window=None):
    """
    Decay rate k of rho_site(t) - 1/2 = A exp(-k t) for a dimer.

    The per-direction classical hopping rate is k / 2.

    Args:
        traj (Trajectory): Two-site trajectory
        site (int): Site whose population is fitted
        window (tuple): Optional (t_lo, t_hi) restriction

    Returns:
        float: Fitted decay rate in 1/ps
    """
    t = traj.times
    y = traj.populations[:, site] - 0.5
    if window is not None:
        mask = (t >= window[0]) & (t <= window[1])
        t, y = t[mask], y[mask]

    usable = np.abs(y) > 1e-12
    if usable.sum() < MIN_FIT_POINTS:
        raise InvalidArgumentError("Not enough non-equilibrium points to fit a rate")

    # Log-linear estimate seeds the nonlinear fit
    slope, intercept = np.polyfit(t[usable], np.log(np.abs(y[usable])), 1)
    guess = (math.copysign(math.exp(intercept), y[usable][0]), max(-slope, 1e-12))

    params, _ = curve_fit(
        lambda s, amplitude, rate: amplitude * np.exp(-rate * s),
        t,
        y,
        p0=guess,
        maxfev=10000,
    )
    return float(params[1])


def ipr_localization(H, band=None):
    """
    Band-averaged participation number 1 / sum_i |psi_ki|^4.

    Args:
        H (np.ndarray): Hermitian matrix
        band (tuple): (start, stop) slice of eigenvalue indices in ascending
            order; all eigenstates when omitted

    Returns:
        LocalizationEstimate: With ell_ipr set
    """
    H = np.asarray(H)
    n = H.shape[0]
    _, vectors = np.linalg.eigh(H)
    start, stop = (0, n) if band is None else band
    selected = vectors[:, start:stop]
    if selected.shape[1] == 0:
        raise InvalidArgumentError(f"Eigenvalue band {band} is empty")

    participation = 1.0 / np.sum(np.abs(selected) ** 4, axis=0)
    ell_ipr = float(np.clip(participation.mean(), 1.0, n))
    return LocalizationEstimate(ell_ipr=ell_ipr)


def dynamic_localization(net, origin, dt=None, horizon=None):
    """
    Saturation length of coherent spreading from one site.

    The network is propagated coherently to T = 50/J. The plateau is the
    window [T/2, T] if the log-log slope of the running RMS displacement,
    sqrt((1/t) int_0^t r^2), stays below 0.1 there and the plateau lies
    below half the RMS spread of a uniform distribution (otherwise the
    walker has only hit the system boundary).

    Args:
        net (SiteNetwork): Network
        origin (int): 0-based starting site
        dt (float): RK4 step; defaults to the dynamics default
        horizon (float): Override for T in ps

    Returns:
        LocalizationEstimate: ell_dynamic (median r on the plateau, or n-1
        with the capped flag when no plateau is found) and tau (first time
        r reaches 90% of ell_dynamic; nan if it never does)
    """
    J = nominal_coupling(net)
    if J <= 0:
        raise InvalidArgumentError("Dynamic localization needs a coupled network")
    T = horizon if horizon is not None else PLATEAU_HORIZON / J

    traj = propagate(
        net,
        OpenSystemSpec(),
        localized_state(net.n_sites, origin),
        T,
        dt=dt,
        sample_interval=T / 1000.0,
    )
    series = msd_curve(traj, origin)
    t, r = series[:, 0], series[:, 1]

    running = np.zeros_like(r)
    running[1:] = np.sqrt(cumulative_trapezoid(r**2, t) / t[1:])
    in_window = t >= 0.5 * T
    slope = float(np.polyfit(np.log(t[in_window]), np.log(running[in_window]), 1)[0])

    plateau = float(np.median(r[in_window]))
    uniform_spread = float(np.sqrt(np.mean(displacements(net.positions, origin) ** 2)))
    found = slope < PLATEAU_SLOPE and plateau < SATURATION_SHARE * uniform_spread

    if found:
        ell_dynamic = plateau
        capped = False
    else:
        ell_dynamic = float(net.n_sites - 1)
        capped = True
        logger.info(f"No localization plateau (slope {slope:.3f}); capping at n-1")

    reached = np.flatnonzero(r >= PLATEAU_FRACTION * ell_dynamic)
    tau = float(t[reached[0]]) if reached.size else math.nan

    return LocalizationEstimate(
        ell_dynamic=ell_dynamic,
        tau=tau,
        capped=capped,
        plateau_window=(0.5 * T, T),
        plateau_slope=slope,
    )


def estimate_disorder_width(net):
    """
    Half-width of a uniform distribution with the network's energy spread.

    Args:
        net (SiteNetwork): Network

    Returns:
        float: sqrt(3) * std(site_energies) in rad/ps
    """
    return float(math.sqrt(3.0) * np.std(net.site_energies))


def localization_report(net, origin, delta_omega=None, band=None):
    """
    All three localization estimators for one network.

    Args:
        net (SiteNetwork): Network
        origin (int): Starting site for the dynamic estimate
        delta_omega (float): Disorder width; estimated from the energies if omitted
        band (tuple): Eigenvalue index range for the IPR average

    Returns:
        LocalizationEstimate: ell_theory, ell_ipr, ell_dynamic and tau
    """
    if delta_omega is None:
        delta_omega = estimate_disorder_width(net)
    estimate = dynamic_localization(net, origin)
    estimate.ell_theory = theory_localization(nominal_coupling(net), delta_omega, net.n_sites)
    estimate.ell_ipr = ipr_localization(hamiltonian(net), band).ell_ipr
    return estimate


def export_msd(series, path):
    """Write an MSD series as CSV (time, r)."""
    return write_msd_csv(series, path)


def export_localization(rows, path):
    """Write per-seed localization estimates as CSV."""
    return write_localization_csv(rows, path)
