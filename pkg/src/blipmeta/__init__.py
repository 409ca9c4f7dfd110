"""Multisite individualized treatment rule estimation from site summaries."""

__version__ = "0.1.0"
