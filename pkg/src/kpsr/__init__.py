"""Kernel-embedded predictive state representations with safe policy search."""

__version__ = "0.1.0"
