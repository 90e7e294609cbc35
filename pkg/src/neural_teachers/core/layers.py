"""Gated recurrent unit, dropout and parameter initialisation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def embedding_table(rng: np.random.Generator, rows: int, dim: int, scale: float = 0.1) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=(rows, dim)), requires_grad=True)


@dataclass
class GruParams:
    """Weights of one GRU cell, stored input-major so that ``x @ W`` applies them."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def input_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruParams":
        return cls(
            W_z=glorot(rng, input_size, hidden_size),
            W_r=glorot(rng, input_size, hidden_size),
            W_h=glorot(rng, input_size, hidden_size),
            U_z=glorot(rng, hidden_size, hidden_size),
            U_r=glorot(rng, hidden_size, hidden_size),
            U_h=glorot(rng, hidden_size, hidden_size),
            b_z=zeros(hidden_size),
            b_r=zeros(hidden_size),
            b_h=zeros(hidden_size),
        )

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "GruParams":
        mats = {f.name: (input_size if f.name.startswith("W") else hidden_size) for f in dataclasses.fields(cls)}
        kw = {}
        for name, rows in mats.items():
            shape = (hidden_size,) if name.startswith("b") else (rows, hidden_size)
            kw[name] = Tensor(np.zeros(shape), requires_grad=True)
        return cls(**kw)

    def validate(self) -> None:
        i, h = self.input_size, self.hidden_size
        for name in ("W_z", "W_r", "W_h"):
            if getattr(self, name).shape != (i, h):
                raise ShapeError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(i, h)}")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (h, h):
                raise ShapeError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(h, h)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (h,):
                raise ShapeError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(h,)}")


def gru_step(x, h_prev, p: GruParams) -> Tensor:
    """One GRU update for a vector or a batch of row vectors.

    z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
    candidate = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * candidate.
    """
    x, h_prev = T.as_tensor(x), T.as_tensor(h_prev)
    if x.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden_size:
        raise ShapeError(
            f"gru_step: input {x.shape} / hidden {h_prev.shape} do not match "
            f"cell {p.input_size}->{p.hidden_size}"
        )
    z = T.sigmoid(x @ p.W_z + h_prev @ p.U_z + p.b_z)
    r = T.sigmoid(x @ p.W_r + h_prev @ p.U_r + p.b_r)
    cand = T.tanh(x @ p.W_h + (r * h_prev) @ p.U_h + p.b_h)
    return h_prev + z * (cand - h_prev)


def masked_update(h_prev: Tensor, h_new: Tensor, mask: np.ndarray) -> Tensor:
    """Keep ``h_prev`` on rows where ``mask`` is 0 (finished sequences)."""
    m = np.asarray(mask, dtype=np.float64)[:, None]
    if m.all():
        return h_new
    return h_prev + m * (h_new - h_prev)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = T.as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))
