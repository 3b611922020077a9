"""Differentiable camera simulation trained jointly with a compact segmentation network."""

__version__ = "0.1.0"
