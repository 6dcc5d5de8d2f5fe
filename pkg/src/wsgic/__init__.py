"""Weakly supervised grounded image captioning, small enough to train on a CPU."""

__version__ = "0.1.0"
