"""AdamW and a one-cycle learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .diffcore import Tensor


def one_cycle_lr(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Linear warmup from ``peak/div`` to ``peak``, then cosine decay to ``peak/(div*final_div)``."""
    if peak_lr == 0:
        return 0.0
    total_steps = max(total_steps, 1)
    warm = max(1, int(round(warmup_frac * total_steps)))
    start = peak_lr / div_factor
    end = start / final_div_factor
    if step < warm:
        return start + (peak_lr - start) * step / warm
    frac = min(1.0, (step - warm) / max(1, total_steps - warm))
    return end + 0.5 * (peak_lr - end) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay; updates ``Tensor.data`` in place."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr == 0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - lr * update


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
