"""Desk-scale multiway transformer: one encoder for image-conditioned text
generation and dual-encoder retrieval, trained with a two-stage recipe."""

__version__ = "0.1.0"
