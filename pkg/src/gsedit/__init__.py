"""Desk-scale Gaussian splat editing: rendering, depth enhancement, wavelet attention and DDIM."""

__version__ = "0.1.0"
