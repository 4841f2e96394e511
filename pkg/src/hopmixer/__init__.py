"""Hierarchical Hopfield networks and their parallelized MLP-Mixer blocks."""

__version__ = "0.1.0"
