"""Multi-density attention loop filter with on-line scaling."""

__version__ = "0.1.0"
