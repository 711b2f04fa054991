"""Modality-bias lab: a small audio-visual recognition toolkit on numpy."""

__version__ = "0.1.0"
