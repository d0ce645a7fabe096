"""Numerical experiments for the continuum Anderson operator on the torus."""

__version__ = "0.1.0"
