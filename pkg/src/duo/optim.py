"""Adam and gradient clipping over autodiff leaves."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays and mutates ``state``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"optimizer state tracks {len(state.m)} arrays, got {len(params)}")
    state.step += 1
    k = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch in Adam slot {i}: {p.shape} vs {g.shape}")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = state.m[i] / (1 - beta1**k)
        v_hat = state.v[i] / (1 - beta2**k)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.values)

    def step(self) -> None:
        new = adam_step([p.values for p in self.params], [p.grad for p in self.params], self.state,
                        self.lr, self.betas[0], self.betas[1], self.eps)
        for p, v in zip(self.params, new):
            p.values = v


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> tuple[float, bool]:
    """Rescale gradients in place to a global L2 norm of at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if not np.isfinite(total):
        raise FloatingPointError("non-finite gradient norm")
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * s
        return total, True
    return total, False
