"""Denoising autoencoder with a modulated-cosine decoder for singing-voice representations."""

__version__ = "0.1.0"
