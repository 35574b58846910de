"""Desk-scale generalized class discovery on synthetic long-tailed data."""

__version__ = "0.1.0"
