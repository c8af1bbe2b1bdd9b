"""Sketch-to-painting style transfer with a guide-decoder residual U-net."""

__version__ = "0.1.0"
