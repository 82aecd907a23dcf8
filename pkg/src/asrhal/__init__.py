"""Hallucinating speech recognition errors with convolutional sequence-to-sequence models."""

__version__ = "0.1.0"
