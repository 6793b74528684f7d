"""Desk-scale long-tailed semi-supervised learning with flexible distribution alignment."""

__version__ = "0.1.0"
