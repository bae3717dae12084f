"""Invariance-regularized unlearning on toy models."""
__version__ = "0.1.0"
