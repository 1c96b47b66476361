"""Anomaly-aware vision-language toolkit for synthetic lesion imagery."""

__version__ = "0.1.0"
