"""Character-level price regression for Hong Kong vehicle registration plates."""

__version__ = "0.1.0"
