"""Toy streaming autoregressive video diffusion engine."""

__version__ = "0.1.0"
