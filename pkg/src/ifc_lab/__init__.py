"""Desk-scale video instance segmentation with inter-frame memory tokens."""

__version__ = "0.1.0"
