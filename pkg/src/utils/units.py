"""
Unit Conversion

Energies and rates are angular frequencies in rad/ps internally (hbar = 1).
"""

import math

from src.utils.errors import InvalidArgumentError

SPEED_OF_LIGHT_CM_PER_S = 2.99792458e10

# 1 cm^-1 expressed as an angular frequency in rad/ps
CM1_TO_RAD_PS = 2.0 * math.pi * SPEED_OF_LIGHT_CM_PER_S * 1e-12

# Accepted spellings, normalized to "cm-1" or "rad/ps"
UNIT_ALIASES = {
    "cm-1": "cm-1",
    "cm^-1": "cm-1",
    "rad/ps": "rad/ps",
    "rad-ps": "rad/ps",
}


def normalize_unit(unit):
    """
    Normalize a unit tag.

    Args:
        unit (str): One of the spellings in UNIT_ALIASES

    Returns:
        str: "cm-1" or "rad/ps"
    """
    try:
        return UNIT_ALIASES[unit]
    except (KeyError, TypeError):
        raise InvalidArgumentError(f"Unknown unit tag: {unit!r}") from None


def unit_factor(unit):
    """Return the multiplier converting a value in `unit` to rad/ps."""
    return CM1_TO_RAD_PS if normalize_unit(unit) == "cm-1" else 1.0


def to_rad_ps(value, unit):
    """
    Convert an energy or rate to rad/ps.

    Args:
        value (float or array): Value(s) in the declared unit
        unit (str): Declared unit tag

    Returns:
        float or array: Value(s) in rad/ps
    """
    return value * unit_factor(unit)


def from_rad_ps(value, unit):
    """Convert an energy or rate in rad/ps to the given unit."""
    return value / unit_factor(unit)
