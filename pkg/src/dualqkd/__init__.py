"""Dual-channel authenticated QKD simulator."""

__version__ = "0.1.0"
