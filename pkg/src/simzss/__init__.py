"""Concept-level alignment of a trainable text tower to a frozen vision tower, at desk scale."""

__version__ = "0.1.0"
