"""SGD with momentum and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from typing import Dict, Mapping, MutableMapping

import numpy as np

from .autodiff import ShapeError, Tensor


def sgd_momentum_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      state: MutableMapping[str, np.ndarray], lr: float,
                      momentum: float = 0.9) -> None:
    """In-place velocity-form update: ``v <- momentum * v + g; p <- p - lr * v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} != param {p.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"{name}: velocity {v.shape} != param {p.shape}")
        v = momentum * v + g
        state[name] = v
        p -= lr * v


def cosine_annealing_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class SGD:
    """Momentum SGD over a dict of named leaf tensors."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 0.01, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        sgd_momentum_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.velocity,
            self.lr if lr is None else lr,
            self.momentum,
        )
