from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. one leaf."""
    g = np.zeros_like(leaf.data)
    flat, gflat = leaf.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn().data)
        flat[i] = orig - step
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-6,
                    per_leaf: bool = False) -> float:
    """Relative error between tape gradients and central differences.

    By default the error is taken over the concatenated gradient of all
    leaves. ``per_leaf`` returns the worst single-leaf error instead, which is
    dominated by roundoff when a leaf's gradient is near zero.
    """
    with Tape() as tape:
        root = fn()
    analytic = [g.copy() for g in backward(tape, root, leaves)]
    numeric = [numeric_grad(fn, leaf, step) for leaf in leaves]
    if per_leaf:
        return max((relative_error(a, n) for a, n in zip(analytic, numeric)), default=0.0)
    flat = lambda gs: np.concatenate([g.reshape(-1) for g in gs]) if gs else np.zeros(0)
    return relative_error(flat(analytic), flat(numeric))
