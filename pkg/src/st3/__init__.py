"""Sparse training by soft-thresholding with straight-through gradients (ST-3)."""

__version__ = "0.1.0"
