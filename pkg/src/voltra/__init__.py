"""Convolution Riccati CGFs and Monte-Carlo simulation for affine Volterra variance and order-flow models."""

__version__ = "0.1.0"
