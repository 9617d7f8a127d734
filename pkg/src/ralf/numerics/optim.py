"""AdamW, global-norm gradient clipping, and the step learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Parameter


class NonFiniteGradient(FloatingPointError):
    pass


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    Decay multiplies the parameter value by ``1 - lr * weight_decay`` before
    the moment-based update; it never enters the gradient.
    """

    params: list
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    names: list | None = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                name = self.names[i] if self.names else (p.name or f"param[{i}]")
                raise NonFiniteGradient(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            p.m = self.beta1 * p.m + (1.0 - self.beta1) * g
            p.v = self.beta2 * p.v + (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            mhat = p.m / bc1
            vhat = p.v / bc2
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"step_count": self.step_count}


def step_lr(base_lr: float, step: int, total_steps: int, drop_at: float = 0.7, factor: float = 0.1) -> float:
    """Learning rate divided by 10 once 70% of training has elapsed."""
    return base_lr * factor if step >= int(drop_at * total_steps) else base_lr


def adamw_step(params, lr=1e-4, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, max_norm: float | None = 0.1, optimizer: AdamW | None = None) -> AdamW:
    """Clip (if ``max_norm``) and take one AdamW step; returns the optimizer for reuse."""
    opt = optimizer or AdamW(list(params), lr, weight_decay, beta1, beta2, eps)
    if max_norm is not None:
        clip_grad_norm(opt.params, max_norm)
    opt.step(lr)
    return opt
