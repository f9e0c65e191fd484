"""Rare event indicator for streamed far-field diffraction scans."""

__version__ = "0.1.0"
