"""Beam-search optimization with sigmoid scoring and early-stop penalties."""

__version__ = "0.1.0"
