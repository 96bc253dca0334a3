"""Adam optimizer with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment estimates and the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(values: np.ndarray, grad: np.ndarray, state: AdamState, key: str) -> np.ndarray:
    """One Adam update for the parameter named ``key``; mutates ``state``.

    The step counter must already be advanced for this step (``state.t >= 1``).
    """
    if values.shape != grad.shape:
        raise ContractError(f"adam_step shape mismatch: {values.shape} vs {grad.shape}")
    if state.t < 1:
        raise ContractError("adam_step called before the step counter was advanced")
    m = state.m.get(key)
    if m is None:
        m = np.zeros_like(values)
        state.v[key] = np.zeros_like(values)
    v = state.v[key]
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
    state.m[key] = m
    state.v[key] = v
    m_hat = m / (1.0 - state.beta1 ** state.t)
    v_hat = v / (1.0 - state.beta2 ** state.t)
    return values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Applies Adam steps to a named parameter dict of Tensors, in place."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        self.state.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ContractError(f"parameter {name!r} does not track gradients")
            p.data = adam_step(p.data, g.astype(p.data.dtype, copy=False), self.state, name)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p._grad = None
