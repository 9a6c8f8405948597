"""B-spline trajectory optimization with a shrinking horizon."""

__version__ = "0.1.0"
