"""Spatio-temporal attention network for face-swap model attribution."""

__version__ = "0.1.0"
