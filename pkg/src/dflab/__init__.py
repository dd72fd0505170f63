"""Numerical laboratory for the Dirichlet-Ferguson diffusion on probability measures over T^d."""

__version__ = "0.1.0"
