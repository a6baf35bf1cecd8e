"""Dual-threshold heatmap pseudo ground-truth generation for weakly supervised detection."""

__version__ = "0.1.0"
