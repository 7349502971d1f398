"""Hierarchical graph-convolutional aggregation of frame-feature sequences."""

__version__ = "0.1.0"
