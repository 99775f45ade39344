"""Finite-volume numerics for random operators with rank-N projection disorder."""

__version__ = "0.1.0"
