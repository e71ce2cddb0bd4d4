"""Adam optimizer and cosine-annealing learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .tensor import DiffError, Tensor


@dataclass
class AdamState:
    """Per-run optimizer state: moments per parameter plus hyperparameters."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list, grads: list, state: AdamState) -> list:
    """One bias-corrected Adam update, in place on the parameter arrays.

    A parameter whose gradient is entirely zero is left untouched, moments
    included, so absent gradients never drift parameters.
    """
    if len(params) != len(grads):
        raise DiffError("parameter and gradient counts differ")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DiffError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.any(g):
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params


class Adam:
    """Convenience wrapper driving adam_step from Tensor parameters."""

    def __init__(self, parameters, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(parameters)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        arrays = [p.data for p in self.params]
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in self.params
        ]
        adam_step(arrays, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(step: int, total: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Annealed rate: min_lr + (base_lr - min_lr) * (1 + cos(pi*step/total)) / 2."""
    if total <= 0:
        raise DiffError("schedule length must be positive")
    if not 0 <= step <= total:
        raise DiffError(f"step {step} outside schedule of length {total}")
    return min_lr + (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total)) / 2.0
