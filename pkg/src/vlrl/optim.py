"""Adaptive moment estimation (Adam)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> OptimizerState:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError(f"optimizer state tracks {len(state.m)} params, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or i} has no gradient")
        if state.m[i].shape != p.data.shape:
            raise ContractError(f"parameter {p.name or i} changed shape")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
    return state


class Adam:
    """Owns a parameter list and its :class:`OptimizerState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        # zero-filled rather than None so params outside this step's graph still step
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        optimizer_step(self.params, self.state)
