"""
Goldilocks - Simulator and closed-form calculator for dephasing-assisted
quantum transport on disordered excitonic networks.
"""

__version__ = "0.1.0"
