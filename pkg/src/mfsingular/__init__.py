"""Particle laboratory for mean-field control with singular (monotone) controls."""

__version__ = "0.1.0"
