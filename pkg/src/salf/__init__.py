"""Sparse local-field voxel scenes with dual ray-cast/rasterize rendering."""

__version__ = "0.1.0"
