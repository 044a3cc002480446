"""SGD and Adam over named parameter collections.

A parameter is only updated when it requires grad and a gradient was actually
accumulated (grad is None means "no signal", so the value stays put).
"""

from __future__ import annotations

import numpy as np

from .autodiff import DiffValue


class SGD:
    def __init__(self, params: dict[str, DiffValue], lr: float):
        self.params = dict(params)
        self.lr = float(lr)
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.step_count += 1
        for p in self.params.values():
            if p.requires_grad and p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params: dict[str, DiffValue], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.step_count)
            vhat = self.v[k] / (1 - b2 ** self.step_count)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, params: dict[str, DiffValue], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")
