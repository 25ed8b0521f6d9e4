"""Distilled retrieval memory for frozen probabilistic forecasters."""

__version__ = "0.1.0"
