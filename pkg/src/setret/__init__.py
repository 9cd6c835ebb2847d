"""Compact set descriptors and multi-element set retrieval."""

__version__ = "0.1.0"
