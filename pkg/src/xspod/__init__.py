"""Scatter-aware X-ray projection simulation and probability-of-detection analysis."""

__version__ = "0.1.0"
