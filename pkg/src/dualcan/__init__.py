"""Dual co-attention fake-news classifier on a self-contained autodiff core."""

__version__ = "0.1.0"
