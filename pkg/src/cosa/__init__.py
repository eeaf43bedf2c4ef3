"""Compact-subspace adversarial attacks on point clouds, at desk scale."""

__version__ = "0.1.0"
