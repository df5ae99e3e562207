"""Tightly coupled GNSS/INS/vision factor-graph estimation with integrity monitoring."""

__version__ = "0.1.0"
