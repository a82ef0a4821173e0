"""Joint infrared/visible fusion and semantic segmentation toolkit."""

__version__ = "0.1.0"
