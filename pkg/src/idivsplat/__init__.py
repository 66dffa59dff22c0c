"""Gaussian splatting with per-Gaussian integrated illumination vectors for normal-aware diffuse shading."""

__version__ = "0.1.0"
