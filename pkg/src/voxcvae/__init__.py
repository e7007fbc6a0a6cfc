"""Conditional VAE toolkit for single-view voxel shape reconstruction."""

__version__ = "0.1.0"
