"""Resolve spoken references to actionable text entities on a phone screen."""

__version__ = "0.1.0"
