"""Mel-spectrogram discrete-latent autoregressive speech-text modeling at desk scale."""

__version__ = "0.1.0"
