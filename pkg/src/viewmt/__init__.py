"""Metamorphic testing of image-processing systems with rendered novel views."""

__version__ = "0.1.0"
