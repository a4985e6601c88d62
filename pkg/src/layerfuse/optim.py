"""AdamW with decoupled weight decay, and the linear-decay LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContractError
from .tensor import Parameter


def linear_decay_lr(step: int, total_steps: int, max_lr: float) -> float:
    """``max_lr`` at step 0, falling linearly to 0 at ``total_steps``.

    Steps past the end clamp to 0.
    """
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if step >= total_steps:
        return 0.0
    return max_lr * (1.0 - step / total_steps)


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Iterable[Parameter], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for p in params:
            if not p.frozen:
                state.exp_avg[p.name] = np.zeros_like(p.data)
                state.exp_avg_sq[p.name] = np.zeros_like(p.data)
        return state


def adamw_step(state: OptimizerState, params: Iterable[Parameter], lr: float) -> None:
    """One bias-corrected AdamW update, in place. Frozen parameters are skipped."""
    params = [p for p in params if not p.frozen]
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
        if p.name not in state.exp_avg:
            raise ContractError(f"parameter {p.name!r} is not registered with the optimizer")
    state.step += 1
    beta1, beta2 = state.betas
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p in params:
        m = state.exp_avg[p.name]
        v = state.exp_avg_sq[p.name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * (p.grad * p.grad)
        data = p.data
        if state.weight_decay:
            data = data * (1.0 - lr * state.weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Thin stateful wrapper around :func:`adamw_step`."""

    def __init__(self, params: Iterable[Parameter], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)
        self.state = OptimizerState.create(self.params, betas=tuple(betas), eps=eps,
                                           weight_decay=weight_decay)

    def step(self, lr: float) -> None:
        adamw_step(self.state, self.params, lr)
