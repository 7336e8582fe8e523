"""Preference-based concept unlearning for conditional diffusion models, on a 2-D toy world."""

__version__ = "0.1.0"
