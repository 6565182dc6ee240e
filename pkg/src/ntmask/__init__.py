"""Mask-pruning toolkit for making trained classifiers non-transferable."""

__version__ = "0.1.0"
