"""Entropy-constrained conformal correction."""

__version__ = "0.1.0"
