"""Simulation and identification of branched deformable linear objects."""

__version__ = "0.1.0"
