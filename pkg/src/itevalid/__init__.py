"""Validation of individualized treatment effect prediction models for two-arm trials."""

__version__ = "0.1.0"
