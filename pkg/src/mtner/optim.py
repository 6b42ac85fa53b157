"""Plain SGD and Adam with decoupled weight decay."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def clip_grad_norm(params: Sequence, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class SGD:
    def __init__(self, params: Sequence, lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self) -> None:
        if self.lr == 0:
            return
        for p in self.params:
            if p.grad is None:
                continue
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class AdamW:
    def __init__(self, params: Sequence, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        decay = 1 - self.lr * self.weight_decay
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            update = m / c1
            update /= denom
            update *= self.lr
            p.data = p.data * decay - update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(name: str, params: Sequence, lr: float, weight_decay: float):
    if name == "sgd":
        return SGD(params, lr, weight_decay)
    if name == "adamw":
        return AdamW(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adamw')")
