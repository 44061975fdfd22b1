"""Category-level 6D pose and shape tracking from depth images."""

__version__ = "0.1.0"
