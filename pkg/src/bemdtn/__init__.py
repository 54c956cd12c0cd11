"""Boundary-element Dirichlet-to-Neumann operators and Steklov spectral shape analysis."""

__version__ = "0.1.0"
