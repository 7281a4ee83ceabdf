"""Speckle-based soft optical tactile sensor simulator."""

__version__ = "0.1.0"
