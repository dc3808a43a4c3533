"""Melody-conditioned chord progression generation with a conditional VAE whose
latent code is disentangled from the melody by domain adversarial training."""

__version__ = "0.1.0"
