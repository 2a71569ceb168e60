"""Incremental self-supervised embeddings for temporally split transaction graphs."""

__version__ = "0.1.0"
