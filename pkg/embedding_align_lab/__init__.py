"""Embedding alignment lab: a toy two-tower model, pixel-space alignment to
text embeddings, and the metrics and detector used to study it."""

from .cli import main

__all__ = ["main"]
