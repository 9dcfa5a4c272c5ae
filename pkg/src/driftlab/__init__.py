"""Drift simulation, density transport, and velocity inversion on periodic grids."""

__version__ = "0.1.0"

from .grid import GridSpec
from .field import VelocityField, VorticityField

__all__ = ["GridSpec", "VelocityField", "VorticityField", "__version__"]
