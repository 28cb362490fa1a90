"""Finite-element normal waves of a rectangular waveguide with a dielectric inclusion."""

__version__ = "0.1.0"
