"""Minimal hand-rolled parameter updates: adaptive-moment (Adam) and plain SGD."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np


class Adam:
    """Standard Adam with bias correction; state per parameter array, float64."""

    def __init__(self, shapes: Sequence[tuple], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: List[np.ndarray] = [np.zeros(s, dtype=np.float64) for s in shapes]
        self.v: List[np.ndarray] = [np.zeros(s, dtype=np.float64) for s in shapes]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


class Sgd:
    """Plain gradient descent with a constant step size."""

    def __init__(self, shapes: Sequence[tuple], lr: float):
        self.lr = float(lr)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


OPTIMIZERS = ("adam", "sgd")


def make_optimizer(name: str, shapes: Sequence[tuple], lr: float):
    if name == "adam":
        return Adam(shapes, lr)
    if name == "sgd":
        return Sgd(shapes, lr)
    raise ValueError(f"optimizer: unknown optimizer {name!r}; expected one of {OPTIMIZERS}")
