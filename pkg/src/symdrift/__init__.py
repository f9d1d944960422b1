"""Symmetry-aware one-shot drifting generative models for typed 3D point clouds."""

__version__ = "0.1.0"
