"""Multi-resolution, multi-reference style normalization for grayscale images."""

__version__ = "0.1.0"
