"""Sparse increment fine-tuning laboratory."""

__version__ = "0.1.0"
