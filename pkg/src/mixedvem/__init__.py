"""Mixed virtual element solver for Darcy flow in fractured porous media."""

__version__ = "0.1.0"
