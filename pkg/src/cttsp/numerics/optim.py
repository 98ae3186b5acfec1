"""Adam with bias correction and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    # Per-tensor update counts drive bias correction; ``step`` counts calls.
    updates: dict[str, int] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], state: OptimizerState, lr: float,
              grads: Optional[dict[str, np.ndarray]] = None) -> OptimizerState:
    """One in-place Adam update of ``params``.

    A tensor whose gradient is missing or identically zero is skipped,
    moments included, so a zero gradient never moves a parameter.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None or not np.any(g):
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter {name} shape {p.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.value)
            state.second_moment[name] = np.zeros_like(p.value)
        v = state.second_moment[name]
        t = state.updates.get(name, 0) + 1
        state.updates[name] = t
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.state = OptimizerState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        adam_step(self.params, self.state, self.lr if lr is None else lr)


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float = 1e-3
    min_lr: float = 0.0
    t_max: int = 2000

    def __call__(self, epoch: int) -> float:
        if not 0 <= epoch <= self.t_max:
            raise ValueError(f"epoch {epoch} outside [0, {self.t_max}]")
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * epoch / self.t_max))


def cosine_lr(epoch: int, base_lr: float = 1e-3, t_max: int = 2000, min_lr: float = 0.0) -> float:
    return CosineSchedule(base_lr, min_lr, t_max)(epoch)

