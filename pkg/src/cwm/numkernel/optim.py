"""AdamW with the linear lr scaling rule and warmup-then-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    """Raised when a gradient contains NaN/inf; the step is not applied."""


@dataclass
class OptimState:
    base_lr: float = 1.5e-4
    batch_size: int = 256
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    warmup_steps: int = 0
    total_steps: int = 1
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    decay_mask: list[bool] | None = None

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0

    def lr_at(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        peak = self.peak_lr
        if self.warmup_steps > 0 and s < self.warmup_steps:
            return peak * (s + 1) / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = min(max(s - self.warmup_steps, 0) / span, 1.0)
        return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def init_state(params: list[Tensor], **kwargs) -> OptimState:
    state = OptimState(**kwargs)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    if state.decay_mask is None:
        # biases and norm gains are not decayed (the (1,1,D) mask token is)
        state.decay_mask = [p.ndim >= 2 for p in params]
    return state


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimState) -> OptimState:
    """Apply one AdamW update in place.

    Raises :class:`NonFiniteGradient` before touching any parameter if a
    gradient is not finite.
    """
    if state.step < 0:
        raise ValueError("step counter must be >= 0")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient at step {state.step}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if state.decay_mask is None:
        state.decay_mask = [p.ndim >= 2 for p in params]
    lr = state.lr_at()
    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v, decay in zip(params, grads, state.m, state.v, state.decay_mask):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if decay and state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr * update).astype(p.dtype, copy=False)
    state.step += 1
    return state
