"""Deformable registration driven by a spatially weighted correlation ratio."""

__version__ = "0.1.0"
