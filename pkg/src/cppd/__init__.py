"""Parallel text-sequence decoding with character counting and ordering context."""

__version__ = "0.1.0"
