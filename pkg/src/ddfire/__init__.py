"""Directional and signed distance fields with fast latent-code inverse rendering."""

__version__ = "0.1.0"
