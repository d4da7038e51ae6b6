"""Simulation and verification toolkit for the bifractional Brownian motion."""

__version__ = "0.1.0"
