"""Granularity-controllable interactive segmentation toolkit."""

__version__ = "0.1.0"
