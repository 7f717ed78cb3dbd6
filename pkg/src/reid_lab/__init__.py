"""Confidence-regularised representation learning and re-identification ranking."""

__version__ = "0.1.0"
