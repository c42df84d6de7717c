"""Sparse-autoencoder features as brain encoding models: training, alignment, encoding and statistics."""

__version__ = "0.1.0"
