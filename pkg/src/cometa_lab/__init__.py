"""Collaborative meta-embedding initialisation for cold-start items."""

__version__ = "0.1.0"
