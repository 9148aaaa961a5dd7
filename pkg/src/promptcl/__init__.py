"""Prompt-pool class-incremental learning on a from-scratch numpy transformer."""

__version__ = "0.1.0"
