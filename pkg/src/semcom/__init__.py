"""Desk-scale generative semantic communication simulator."""

__version__ = "0.1.0"
