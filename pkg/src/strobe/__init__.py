"""Space-time registration-based model reduction for 1D conservation laws."""

__version__ = "0.1.0"
