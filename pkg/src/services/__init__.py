"""
Simulation and analysis services for the Goldilocks transport simulator.
"""
