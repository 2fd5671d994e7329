"""navlab: a desk-scale object-goal navigation training lab."""

__version__ = "0.1.0"
