"""Degradation-aware deep Retinex low-light enhancement."""
__version__ = "0.1.0"
