"""
Utility modules for the Goldilocks transport simulator.
"""
