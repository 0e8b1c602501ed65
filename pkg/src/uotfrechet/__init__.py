"""Unbalanced optimal transport Frechet regression for time-indexed point clouds."""

__version__ = "0.1.0"
