"""Segmentation-guided single-image dehazing toolkit."""

__version__ = "0.1.0"
