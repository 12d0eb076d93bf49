"""Frequency-domain VTI acoustic wavefield reconstruction inversion (ADMM)."""

__version__ = "0.1.0"
