"""Latent generative front-end for speech: waveform VAE, conditional DiT and three generative objectives."""

__version__ = "0.1.0"
