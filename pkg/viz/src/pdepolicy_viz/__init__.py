"""Plot rendering for pdepolicy experiment artifacts."""

__version__ = "0.1.0"
