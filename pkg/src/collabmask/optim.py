"""AdamW with decoupled weight decay, and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .errors import CompatibilityError
from .tensor import Tensor


def lr_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    decay = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / decay, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def default_decay_filter(name: str, param: Tensor) -> bool:
    """Decay matrices only; biases, norms, tokens and position tables are exempt."""
    return param.ndim == 2 and name.endswith(".weight")


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a named parameter registry.

    Only parameters passed at construction (or via :meth:`add`) are ever
    updated; the registry is what trainer audits check against.
    """

    params: Dict[str, Tensor]
    betas: Tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step_count: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    decay_filter: Optional[object] = None

    def __post_init__(self):
        self.params = dict(self.params)
        if self.decay_filter is None:
            self.decay_filter = default_decay_filter
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, np.zeros_like(p.data))
            self.exp_avg_sq.setdefault(name, np.zeros_like(p.data))

    def add(self, params: Dict[str, Tensor]) -> None:
        for name, p in params.items():
            if name in self.params:
                raise CompatibilityError(f"parameter {name} already registered")
            self.params[name] = p
            self.exp_avg[name] = np.zeros_like(p.data)
            self.exp_avg_sq[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and self.decay_filter(name, p):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def names(self) -> Iterable[str]:
        return self.params.keys()


def adamw_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    opt: AdamW,
    lr: float,
) -> AdamW:
    """Functional wrapper: install ``grads`` on the registered params and step."""
    for name, g in grads.items():
        params[name].grad = g
    opt.step(lr)
    return opt
