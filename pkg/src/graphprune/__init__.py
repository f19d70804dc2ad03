"""Pruning-policy search driven by graph-learned layer embeddings."""

__version__ = "0.1.0"
