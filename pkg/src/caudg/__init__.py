"""Causality-inspired domain generalization for sensor-based activity recognition."""

__version__ = "0.1.0"
