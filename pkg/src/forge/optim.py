"""First-order optimizers over lists of tensors."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .tensor import Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params: List[Tensor] = list(params)
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """SGD with (heavy-ball) momentum and optional L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = (p.data - self.lr * v).astype(p.dtype)


class Adam(Optimizer):
    """Adam with bias-corrected moments starting at zero."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)
