"""Entropy-gated tile classification pipeline for image authorship attribution."""

__version__ = "0.1.0"
