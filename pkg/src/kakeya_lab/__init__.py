"""Numerical verification lab for multilinear Kakeya-type inequalities."""

__version__ = "0.1.0"
