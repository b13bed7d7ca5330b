"""Numerical certificates for bang-singular optimal control of a semilinear heat equation."""

__version__ = "0.1.0"
