"""AdamW with decoupled weight decay and a per-step cosine learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamWState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adamw_step(params: Sequence, grads: Sequence[np.ndarray], state: AdamWState, lr: float, wd: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place update. Decay shrinks the weights first, then the
    bias-corrected Adam step is applied on the shrunk weights."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, moment {m.shape}")
        g = g.astype(m.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd:
            p.data *= 1.0 - lr * wd
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype, copy=False)


class AdamW:
    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 1e-2, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamWState.zeros_like(self.params)

    def step(self, grads=None) -> None:
        if grads is None:
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adamw_step(self.params, grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)
