"""Subspace AoA features and adaptive learners for indoor localization on synthetic CSI."""

__version__ = "0.1.0"
