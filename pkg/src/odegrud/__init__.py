"""Irregular time-series classification with GRU-D and ODE-driven GRU-D models."""

__version__ = "0.1.0"
