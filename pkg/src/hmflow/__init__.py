"""Numerical laboratory for harmonic map flow and bubble decompositions of maps S^2 -> S^2."""

__version__ = "0.1.0"
