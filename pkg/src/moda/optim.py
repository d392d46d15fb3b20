"""AdamW with a warmup+cosine schedule, plus parameter initializers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor


def xavier_init(shape, rng: Rng) -> Tensor:
    """Uniform Glorot draw in +-sqrt(6 / (fan_in + fan_out)); rank >= 2."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ShapeError(f"xavier_init needs rank >= 2 for fan computation, got {shape}")
    fan_in = int(np.prod(shape[:-1]))
    fan_out = shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(shape, -bound, bound))


@dataclass
class WarmupCosine:
    """Linear ramp to base_lr over the warmup fraction, cosine decay to 0.

    lr_at(0) == 0, lr_at(warmup_steps) == base_lr exactly, and
    lr_at(total_steps) == 0 exactly. Optimizer updates are 1-indexed so
    the ramp is fully used and the last update lands on zero.
    """

    base_lr: float
    total_steps: int
    warmup_frac: float = 0.03

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        self.warmup_steps = max(1, round(self.warmup_frac * self.total_steps))

    def lr_at(self, step: int) -> float:
        if step <= 0:
            return 0.0
        if step <= self.warmup_steps:
            return self.base_lr * (step / self.warmup_steps)
        span = max(1, self.total_steps - self.warmup_steps)
        t = min(step - self.warmup_steps, span)
        return self.base_lr * 0.5 * (1.0 + np.cos(np.pi * t / span))


@dataclass
class AdamW:
    """Decoupled weight decay Adam over a fixed dict of named parameters."""

    params: dict[str, Tensor]
    schedule: WarmupCosine
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    @property
    def current_lr(self) -> float:
        return self.schedule.lr_at(self.step_count)

    def step(self) -> float:
        """Apply one update to every parameter; returns the lr used."""
        self.step_count += 1
        lr = self.schedule.lr_at(self.step_count)
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay != 0.0:
                update = update + self.weight_decay * p.data
            p.data -= lr * update
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
