"""Adam with decoupled weight decay and the one-cycle schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Parameter],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> AdamState:
    """One in-place AdamW update of every parameter holding a gradient.

    Weight decay is decoupled: the parameter is first scaled by
    ``1 - lr * weight_decay``, then the bias-corrected Adam step is applied.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"adam state for {name} has shape {m.shape}, parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    max_lr: float = 3e-3
    div_factor: float = 10.0
    final_div_factor: float = 1e4
    pct_start: float = 0.4
    momentum_range: tuple[float, float] = (0.85, 0.95)

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def peak_step(self) -> float:
        return self.pct_start * self.total_steps


def _cos_interp(start: float, end: float, frac: float) -> float:
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(step: int, schedule: OneCycleSchedule) -> tuple[float, float]:
    """Learning rate and momentum (Adam beta1) at ``step``.

    Cosine warm-up from ``max_lr/div_factor`` to ``max_lr`` over the first
    ``pct_start`` of the run, then cosine decay to
    ``initial_lr/final_div_factor``.  Momentum mirrors the learning rate
    between the high and low ends of ``momentum_range``.  Steps past the
    end are clamped.
    """
    lo_m, hi_m = schedule.momentum_range
    total = max(schedule.total_steps, 1)
    step = min(max(step, 0), total)
    peak = schedule.peak_step
    if step <= peak and peak > 0:
        frac = step / peak
        return _cos_interp(schedule.initial_lr, schedule.max_lr, frac), _cos_interp(hi_m, lo_m, frac)
    frac = (step - peak) / max(total - peak, 1e-12)
    final_lr = schedule.initial_lr / schedule.final_div_factor
    return _cos_interp(schedule.max_lr, final_lr, frac), _cos_interp(lo_m, hi_m, frac)
