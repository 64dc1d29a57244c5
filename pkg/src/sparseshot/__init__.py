"""Sparse-shot localisation toolkit built around exclusive cross-entropy."""

__version__ = "0.1.0"
