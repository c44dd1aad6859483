"""Momentum SGD with global gradient-norm smoothing and epoch LR schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import NumericError, Tensor


@dataclass
class SmoothedGradState:
    """Exponential moving average of the global gradient norm."""

    alpha: float = 0.99
    g_bar: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")


@dataclass
class SGDConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    smoothing: bool = False
    alpha: float = 0.99
    # apply the smoothing factor to the raw gradient (True) or to the momentum buffer
    smooth_before_momentum: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def global_grad_norm(params: Iterable[Tensor]) -> float:
    """L2 norm of all parameter gradients concatenated (ordered reduction)."""
    total = 0.0
    for p in params:
        if p.grad is None:
            continue
        s = float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel().astype(np.float64)))
        if not math.isfinite(s):
            raise NumericError("non-finite gradient")
        total += s
    return math.sqrt(total)


def update_smoothing(state: SmoothedGradState, g_t: float) -> float:
    """Fold ``g_t`` into the running norm and return the factor ``g_bar / g_t``."""
    if g_t < 0:
        raise ValueError("gradient norm must be non-negative")
    if not state.initialized:
        state.g_bar = float(g_t)
        state.initialized = True
        return 1.0
    if g_t == 0.0:
        return 1.0
    # incremental form of alpha*g_bar + (1-alpha)*g_t; exact fixed point when g_t == g_bar
    state.g_bar = state.g_bar + (1.0 - state.alpha) * (g_t - state.g_bar)
    return state.g_bar / g_t


class SGD:
    """Momentum SGD; weight decay applies only to parameters flagged ``decay``.

    Update per parameter, with ``k`` the smoothing factor (1 when off)::

        g_eff = k * grad + wd * w
        v     = momentum * v + g_eff
        w     = w - lr_t * v
    """

    def __init__(self, params: Sequence[Tensor], cfg: SGDConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = SmoothedGradState(cfg.alpha)
        self.buffers = [None] * len(self.params)
        self.step_count = 0
        self.last_grad_norm = 0.0
        self.last_multiplier = 1.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr_t: Optional[float] = None) -> float:
        """Apply one update; returns the raw global gradient norm."""
        lr_t = self.cfg.lr if lr_t is None else lr_t
        if lr_t <= 0:
            raise ValueError("learning rate must be positive")
        g_t = global_grad_norm(self.params)
        k = update_smoothing(self.state, g_t) if self.cfg.smoothing else 1.0
        pre, post = (k, 1.0) if self.cfg.smooth_before_momentum else (1.0, k)
        mom, wd = self.cfg.momentum, self.cfg.weight_decay
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * pre if pre != 1.0 else p.grad.copy()
            if wd and getattr(p, "decay", False):
                g += wd * p.data
            if mom:
                buf = self.buffers[i]
                if buf is None:
                    buf = self.buffers[i] = np.zeros_like(p.data)
                buf *= mom
                buf += g
                g = buf
            update = (lr_t * post) * g
            if not np.all(np.isfinite(update)):
                raise NumericError(f"non-finite update at step {self.step_count}")
            p.data -= update.astype(p.data.dtype, copy=False)
        self.step_count += 1
        self.last_grad_norm = g_t
        self.last_multiplier = k
        return g_t

    def state_dict(self) -> dict:
        return {"g_bar": self.state.g_bar, "initialized": self.state.initialized,
                "step_count": self.step_count,
                "buffers": [None if b is None else b.copy() for b in self.buffers]}


def sgd_step(params, cfg: SGDConfig, state: SmoothedGradState, lr_t: float, buffers=None) -> float:
    """Functional form of :meth:`SGD.step`; ``state`` and ``buffers`` are updated in place."""
    opt = SGD(params, cfg)
    opt.state = state
    if buffers is not None:
        opt.buffers = buffers
    return opt.step(lr_t)


def lr_schedule(kind: str, base_lr: float, epoch: float, total_epochs: int,
                milestones: Sequence[int] = (), gamma: float = 0.1) -> float:
    if kind == "step_decay":
        return base_lr * gamma ** sum(epoch >= m for m in milestones)
    if kind == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
    if kind == "constant":
        return base_lr
    raise ValueError(f"unknown lr schedule {kind!r}")
