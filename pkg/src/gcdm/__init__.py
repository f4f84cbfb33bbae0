"""Guidance composition for diffusion samplers over analytic Gaussian-mixture worlds."""

__version__ = "0.1.0"
