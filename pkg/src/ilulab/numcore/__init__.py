"""Deterministic float64 numerics: loss kernels, RNG streams, gradient oracle."""
from .fd import finite_difference_gradient, relative_error
from .kernels import BACKEND
from .losses import softmax, softmax_cross_entropy
from .rng import RngStream, stream_id

__all__ = [
    "BACKEND",
    "RngStream",
    "finite_difference_gradient",
    "relative_error",
    "softmax",
    "softmax_cross_entropy",
    "stream_id",
]
