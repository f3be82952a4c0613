"""Desk-scale toolkit for training, self-conditioning, and analyzing diffusion models."""

__version__ = "0.1.0"
