"""Articulated-object reconstruction with semantic Gaussian splats."""
__version__ = "0.1.0"
