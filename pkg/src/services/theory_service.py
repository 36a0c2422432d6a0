"""
Theory Service

Closed-form estimators for dephasing-assisted transport: the Goldilocks
parameter Lambda, the optimal dephasing rate, transient localization, band
splitting, the two-state transfer model, the high-temperature decoherence
rate and the optimal spread.

All quantities use hbar = 1: energies and rates are in rad/ps, times in ps
and lengths in sites. Numeric prefactors the heuristics leave open are
folded into alpha.
"""

import math
from dataclasses import dataclass

from src.utils.errors import InvalidArgumentError

# Lambda bounds of the high-efficiency window
EFFICIENT_LAMBDA_LOW = 0.2
EFFICIENT_LAMBDA_HIGH = 5.0


def _require_positive(**values):
    for name, value in values.items():
        if not math.isfinite(value) or value <= 0:
            raise InvalidArgumentError(f"{name} must be positive, got {value}")


def _require_non_negative(**values):
    for name, value in values.items():
        if math.isnan(value) or value < 0:
            raise InvalidArgumentError(f"{name} must be >= 0, got {value}")


def _require_correlation(c):
    if not -1.0 <= c <= 1.0:
        raise InvalidArgumentError(f"Correlation c must lie in [-1, 1], got {c}")


@dataclass(frozen=True)
class MicroParams:
    """Microscopic quantities entering Lambda (rates/energies in rad/ps)."""

    alpha: float = 1.0
    c: float = 0.0
    lambda_reorg: float = 1.0
    kT: float = 1.0
    gamma: float = 1.0
    deltaE: float = 1.0

    def __post_init__(self):
        _require_positive(
            alpha=self.alpha,
            lambda_reorg=self.lambda_reorg,
            kT=self.kT,
            gamma=self.gamma,
        )
        _require_non_negative(deltaE=self.deltaE)
        _require_correlation(self.c)


@dataclass(frozen=True)
class TwoStateResult:
    """Maximum transfer probability of a detuned dimer and when it occurs."""

    p_max: float
    omega: float
    t_peak: float


def lambda_param(d, ell, J):
    """
    Goldilocks parameter Lambda = d * ell / (2 J).

    Args:
        d (float): Dephasing rate in 1/ps
        ell (float): Transient localization length in sites
        J (float): Nearest-neighbor coupling in rad/ps

    Returns:
        float: Lambda (dimensionless)
    """
    _require_positive(d=d, ell=ell, J=J)
    return d * ell / (2.0 * J)


def lambda_localized(d, J, delta):
    """
    Lambda = d / (2 Omega) with Omega = sqrt(J^2 + delta^2), for ell < 1.

    Args:
        d (float): Dephasing rate in 1/ps
        J (float): Coupling in rad/ps
        delta (float): Detuning in rad/ps

    Returns:
        float: Lambda (dimensionless)
    """
    _require_non_negative(d=d, J=J, delta=delta)
    omega = math.hypot(J, delta)
    if omega == 0:
        raise InvalidArgumentError("lambda_localized needs J > 0 or delta > 0")
    return d / (2.0 * omega)


def lambda_micro(p):
    """
    Lambda = alpha (1 - c) lambda kT / (gamma deltaE).

    Args:
        p (MicroParams): Microscopic parameters

    Returns:
        float: Lambda (dimensionless)
    """
    if p.deltaE == 0:
        raise InvalidArgumentError("lambda_micro needs a non-zero band splitting")
    return p.alpha * (1.0 - p.c) * p.lambda_reorg * p.kT / (p.gamma * p.deltaE)


def theory_localization(J, delta_omega, n):
    """
    Transient localization length (J / delta_omega)^2 clamped to [1, n - 1].

    Args:
        J (float): Coupling in rad/ps
        delta_omega (float): Disorder width in rad/ps
        n (float): Number of sites (math.inf for an unbounded system)

    Returns:
        float: Localization length in sites; n - 1 without disorder
    """
    _require_positive(J=J)
    _require_non_negative(delta_omega=delta_omega)
    if not n >= 2:
        raise InvalidArgumentError(f"n must be >= 2, got {n}")
    if delta_omega == 0:
        return n - 1
    return min(max((J / delta_omega) ** 2, 1.0), n - 1)


def localization_time(J, ell):
    """Time tau = ell / (2 J) to traverse the localization length."""
    _require_positive(J=J, ell=ell)
    return ell / (2.0 * J)


def optimal_dephasing(J, ell):
    """Optimal dephasing rate d* = 2 J / ell, equal to band_splitting / pi."""
    _require_positive(J=J, ell=ell)
    return 2.0 * J / ell


def band_splitting(J, ell):
    """Mean level spacing 2 pi J / ell of a band delocalized over ell sites."""
    _require_positive(J=J, ell=ell)
    return 2.0 * math.pi * J / ell


def optimal_dephasing_from_disorder(J, delta_omega):
    """d* = 1/tau = 2 delta_omega^2 / J with ell = (J / delta_omega)^2."""
    _require_positive(J=J, delta_omega=delta_omega)
    return 2.0 * delta_omega**2 / J


def localization_time_from_disorder(J, delta_omega):
    """tau = J / (2 delta_omega^2) with ell = (J / delta_omega)^2."""
    _require_positive(J=J, delta_omega=delta_omega)
    return J / (2.0 * delta_omega**2)


def two_state(J, delta):
    """
    Detuned dimer with site energies {0, 2 delta} and coupling J.

    Args:
        J (float): Coupling in rad/ps
        delta (float): Half the site-energy difference in rad/ps

    Returns:
        TwoStateResult: p_max = J^2 / Omega^2, Omega, t_peak = pi / (2 Omega)
    """
    _require_positive(J=J)
    if not math.isfinite(delta):
        raise InvalidArgumentError(f"delta must be finite, got {delta}")
    omega = math.hypot(J, delta)
    return TwoStateResult(
        p_max=J**2 / omega**2,
        omega=omega,
        t_peak=math.pi / (2.0 * omega),
    )


def decoherence_rate(alpha, c, lambda_reorg, kT, gamma):
    """
    High-temperature relative dephasing rate alpha (1 - c) lambda kT / gamma.

    Args:
        alpha (float): O(1) prefactor (2 pi for an uncorrelated ohmic bath)
        c (float): Neighbor noise correlation in [-1, 1]
        lambda_reorg (float): Reorganization energy in rad/ps
        kT (float): Thermal energy in rad/ps
        gamma (float): Inverse bath correlation time in rad/ps

    Returns:
        float: Dephasing rate in 1/ps
    """
    if not gamma > 0:
        raise InvalidArgumentError(f"gamma must be positive, got {gamma}")
    _require_correlation(c)
    _require_non_negative(alpha=alpha, lambda_reorg=lambda_reorg, kT=kT)
    return alpha * (1.0 - c) * lambda_reorg * kT / gamma


def optimal_spread(t, J, ell):
    """Spread sqrt(2 t J ell) of the random walk at the optimal dephasing rate."""
    _require_positive(t=t, J=J, ell=ell)
    return math.sqrt(2.0 * t * J * ell)


def localized_spread(t, J, omega):
    """Spread J sqrt(2 t / Omega) of a strongly localized walker at optimum."""
    _require_positive(t=t, J=J, omega=omega)
    return J * math.sqrt(2.0 * t / omega)


def regime_spread(t, d, J, ell):
    """
    Random-walk spread away from the optimum.

    Below the optimum (d < 1/tau) the walker takes steps of ell every 1/d:
    r = ell sqrt(t d). Above it the coherent step shrinks to 2J/d:
    r = 2J sqrt(t / d). Both equal optimal_spread at d = 1/tau.

    Args:
        t (float): Time in ps
        d (float): Dephasing rate in 1/ps
        J (float): Coupling in rad/ps
        ell (float): Localization length in sites

    Returns:
        float: Spread in sites
    """
    _require_positive(t=t, d=d, J=J, ell=ell)
    if d < 1.0 / localization_time(J, ell):
        return ell * math.sqrt(t * d)
    return 2.0 * J * math.sqrt(t / d)


def transport_regime(d, J, ell):
    """
    Classify a dephasing rate relative to the high-efficiency window.

    Returns:
        str: "localized" (Lambda < 0.2), "optimal" or "overdamped" (Lambda > 5)
    """
    value = lambda_param(d, ell, J)
    if value < EFFICIENT_LAMBDA_LOW:
        return "localized"
    if value > EFFICIENT_LAMBDA_HIGH:
        return "overdamped"
    return "optimal"
