"""Deterministic post-training data transformations."""

__version__ = "0.1.0"
