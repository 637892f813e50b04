"""Benchmark toolkit for anomaly detection under chronological distribution shift."""

__version__ = "0.1.0"
