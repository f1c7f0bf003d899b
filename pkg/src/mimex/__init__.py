"""Masked input modeling for exploration, with a from-scratch autodiff engine."""

__version__ = "0.1.0"
