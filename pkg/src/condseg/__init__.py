"""Conditioning 2D segmentation networks on non-imaging vectors."""

__version__ = "0.1.0"
