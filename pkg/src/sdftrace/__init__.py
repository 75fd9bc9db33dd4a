"""Sphere-traced interval volume rendering of SDF scenes with anchor-image blending,
plus the geometry and consistency losses and a small SDF fitter."""

__version__ = "0.1.0"
