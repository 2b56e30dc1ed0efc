"""Hierarchical cross-modal interaction for text-video retrieval on precomputed token features."""

__version__ = "0.1.0"
