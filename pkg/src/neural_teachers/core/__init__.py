"""Numeric substrate: tensors with reverse-mode gradients, a GRU cell, dropout, Adam."""
from .layers import GruParams, dropout, gru_step, masked_update
from .optim import Adam, AdamState, adam_step
from .tensor import ShapeError, Tape, Tensor, backward

__all__ = [
    "Adam",
    "AdamState",
    "GruParams",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "dropout",
    "gru_step",
    "masked_update",
]
