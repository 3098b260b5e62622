"""Desk-scale KL-VAE laboratory."""

__version__ = "0.1.0"
