"""Sensitivity-driven ReLU reduction for private-inference friendly networks."""

__version__ = "0.1.0"
