"""Desk-scale lab for diversity-regularized multi-channel vision transformers."""

__version__ = "0.1.0"
