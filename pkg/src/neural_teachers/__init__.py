"""Ordering teachers, a conditioned recipe generator and self-critical policy learning."""

__version__ = "0.1.0"
