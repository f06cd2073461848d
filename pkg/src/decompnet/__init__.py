"""Instance detection and segmentation by recurrent decomposition of category response maps."""

__version__ = "0.1.0"
