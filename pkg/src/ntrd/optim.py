"""Adam optimizer and global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamState:
    """Per-parameter first/second moment buffers plus the step counter.

    Parameters are registered once, by name, so the moment buffers can be
    checkpointed and restored.
    """

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.params = list(params)
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}


def adam_step(params: list[tuple[str, Tensor]], state: AdamState) -> None:
    """Apply one bias-corrected Adam update, then zero the gradients."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"parameter '{name}' has no gradient buffer")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        g.fill(0.0)


def global_grad_norm(params: list[tuple[str, Tensor]]) -> float:
    total = 0.0
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"parameter '{name}' has no gradient buffer")
        total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_gradients(params: list[tuple[str, Tensor]], max_norm: float = 0.1) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when no clipping was needed).
    """
    norm = global_grad_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for _, p in params:
        p.grad *= factor
    return factor
