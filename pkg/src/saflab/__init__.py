"""Desk-scale lab for mask-driven tool instantiation, tube-contrastive
feature learning and weak-label instance classification."""

__version__ = "0.1.0"
