"""AdamW with linear-warmup / cosine-decay scheduling.

Used by both the alignment stage and the autoregressive pretraining stage;
updates are plain numpy and fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to peak_lr over warmup_steps, then cosine decay to
    min_lr at total_steps."""

    total_steps: int
    peak_lr: float = 5e-4
    warmup_steps: int = 100
    weight_decay: float = 1e-5
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if self.warmup_steps < 0 or self.peak_lr < 0 or self.weight_decay < 0:
            raise ValidationError("schedule values must be non-negative")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        cos = 0.5 * (1.0 + np.cos(np.pi * progress))
        return self.min_lr + (self.peak_lr - self.min_lr) * cos


class AdamW:
    """Adaptive moments with decoupled weight decay (decay scaled by lr)."""

    def __init__(
        self,
        params: list[np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        """Update parameters in place."""
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValidationError("parameter/gradient count changed between steps")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p -= lr * (m_hat / (np.sqrt(v_hat) + self.eps))
            if self.weight_decay:
                p -= lr * self.weight_decay * p
