"""Conditional diffusion neural operator for PDE forward/inverse problems."""

__version__ = "0.1.0"
