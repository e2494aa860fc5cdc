"""Contrastive point-wise segmentation and per-class clustering for radar detection points."""

__version__ = "0.1.0"
