"""Marker-based stochastic human motion prediction with a latent DCT space."""

__version__ = "0.1.0"
