"""Spatial extreme precipitation extents with time-varying r-Pareto processes."""
__version__ = "0.1.0"
