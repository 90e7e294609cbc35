"""Walking nested parameter dataclasses as flat name -> Tensor maps."""
from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from .tensor import Tensor


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, Tensor):
            out[name] = value
        elif dataclasses.is_dataclass(value):
            out.update(named_tensors(value, name + "."))
    return out


def to_arrays(obj) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in named_tensors(obj).items()}


def load_arrays(obj, arrays: dict[str, np.ndarray]) -> None:
    tensors = named_tensors(obj)
    missing = sorted(set(tensors) - set(arrays))
    extra = sorted(set(arrays) - set(tensors))
    if missing or extra:
        raise KeyError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for k, t in tensors.items():
        if arrays[k].shape != t.shape:
            raise ValueError(f"{k}: stored shape {arrays[k].shape}, model expects {t.shape}")
        t.data = np.array(arrays[k], dtype=np.float64)


def freeze(obj) -> None:
    for t in named_tensors(obj).values():
        t.requires_grad = False
        t.grad = None


def checksum(obj) -> str:
    """SHA-256 over parameter names, shapes and raw float64 bytes."""
    h = hashlib.sha256()
    for k, t in sorted(named_tensors(obj).items()):
        h.update(k.encode())
        h.update(repr(t.shape).encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()
