from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, like: np.ndarray, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros_like(like), np.zeros_like(like), 0, lr, beta1, beta2, eps)


def adam_step(param: Tensor, grad: np.ndarray, s: AdamState) -> tuple[Tensor, AdamState]:
    """Bias-corrected Adam update, applied to ``param.data`` in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or s.m.shape != param.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {grad.shape}, state {s.m.shape}")
    s.t += 1
    s.m *= s.beta1
    s.m += (1.0 - s.beta1) * grad
    s.v *= s.beta2
    s.v += (1.0 - s.beta2) * (grad * grad)
    m_hat = s.m / (1.0 - s.beta1 ** s.t)
    v_hat = s.v / (1.0 - s.beta2 ** s.t)
    param.data -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
    return param, s


@dataclass
class Adam:
    """Adam over a fixed, ordered set of named parameters."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.states[name] = AdamState.fresh(p.data, self.lr, self.beta1, self.beta2, self.eps)

    def step(self) -> float:
        """Apply one update from the ``.grad`` buffers; returns the gradient norm."""
        grads = {}
        for name, p in self.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, p in self.params.items():
            g = grads[name] if scale == 1.0 else grads[name] * scale
            adam_step(p, g, self.states[name])
            p.grad = None
        return norm
