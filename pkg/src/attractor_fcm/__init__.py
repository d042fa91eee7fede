"""Attractor fuzzy cognitive maps with Jacobian gradient descent."""

__version__ = "0.1.0"
