"""Congested chemotaxis by constrained minimizing movements on a grid."""

from .grid import DensityField, Grid, ScalarField, VectorField

__all__ = ["Grid", "ScalarField", "DensityField", "VectorField"]
__version__ = "0.1.0"
