"""Weakly supervised phrase grounding through caption-conditioned region matching."""

__version__ = "0.1.0"
