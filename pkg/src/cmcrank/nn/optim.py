"""AdamW with decoupled weight decay and a linear warmup/decay schedule.

The effective learning rate at step ``s`` (0-based) is
``base_lr * warmup_schedule(s, total_steps, warmup_fraction)``: it rises
linearly from 0 over the first ``warmup_fraction`` of the run and then
decays linearly back to 0.  ``total_steps == 0`` selects a constant
schedule, useful for single-step tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import InvalidShape, StateError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def warmup_schedule(step: int, total_steps: int, warmup_fraction: float) -> float:
    """Linear warmup then linear decay; 1.0 everywhere if total_steps == 0."""
    if total_steps <= 0:
        return 1.0
    warmup_steps = max(1, int(round(warmup_fraction * total_steps)))
    if step < warmup_steps:
        return step / warmup_steps
    if total_steps <= warmup_steps:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - warmup_steps))


@dataclass
class OptimizerState:
    """Per-parameter AdamW moments plus the schedule bookkeeping."""

    learning_rate: float
    weight_decay: float = 0.0
    warmup_fraction: float = 0.1
    total_steps: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_arrays(cls, arrays: Mapping[str, np.ndarray], learning_rate: float,
                   **kwargs) -> "OptimizerState":
        state = cls(learning_rate=learning_rate, **kwargs)
        state.m = {name: np.zeros_like(a) for name, a in arrays.items()}
        state.v = {name: np.zeros_like(a) for name, a in arrays.items()}
        return state

    def effective_lr(self) -> float:
        return self.learning_rate * warmup_schedule(
            self.step, self.total_steps, self.warmup_fraction)


def adamw_step(arrays: Mapping[str, np.ndarray],
               grads: Mapping[str, np.ndarray],
               state: OptimizerState) -> None:
    """One in-place AdamW update over every named parameter buffer."""
    if state.total_steps > 0 and state.step >= state.total_steps:
        raise StateError(f"optimizer already ran its {state.total_steps} steps")
    lr = state.effective_lr()
    t = state.step + 1
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t

    for name, theta in arrays.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise InvalidShape(
                f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        m_hat = m / bias1
        v_hat = v / bias2
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * theta
        theta -= (lr * update).astype(theta.dtype, copy=False)
    state.step += 1
