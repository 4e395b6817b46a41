"""Simulation, localization and PSF co-design for 3D single-molecule microscopy."""

__version__ = "0.1.0"
