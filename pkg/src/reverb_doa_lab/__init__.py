"""Reverberant two-microphone DOA estimation: simulation, RTF features,
SRP-PHAT, a supervised CNN and a semi-supervised VAE classifier."""

__version__ = "0.1.0"
