"""Piecewise Lyapunov functions for stochastically stabilized polynomial ODEs in the plane."""

__version__ = "0.1.0"
