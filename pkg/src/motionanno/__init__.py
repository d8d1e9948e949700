"""Markerless whole-body motion annotation toolkit."""

__version__ = "0.1.0"
