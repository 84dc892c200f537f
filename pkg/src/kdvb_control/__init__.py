"""Simulation, Carleman weights, and null/tracking controls for the
KdV-Burgers equation with pinned-periodic mixed boundary conditions."""

__version__ = "0.1.0"
