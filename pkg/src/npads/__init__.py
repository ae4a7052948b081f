"""Unsupervised anomalous-sound detection with Neyman-Pearson trained autoencoders."""

__version__ = "0.1.0"
