"""Numerical laboratory for blow-up and condensation of small-initialization training dynamics."""

__version__ = "0.1.0"
