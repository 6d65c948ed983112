"""Tumor spheroid segmentation, evaluation metrics and statistics."""

__version__ = "0.1.0"
