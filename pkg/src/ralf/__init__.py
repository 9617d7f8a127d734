"""Retrieval-augmented content-aware layout generation."""

__version__ = "0.1.0"
