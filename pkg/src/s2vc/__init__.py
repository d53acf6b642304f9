"""Desk-scale any-to-any voice conversion with cross-attention alignment."""

__version__ = "0.1.0"
