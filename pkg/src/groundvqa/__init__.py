"""Weakly supervised grounded video question answering at desk scale."""

__version__ = "0.1.0"
