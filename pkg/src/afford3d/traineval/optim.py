"""AdamW and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..autodiff import Tensor


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 2e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState,
               t: int, cfg: AdamWConfig, lr: float | None = None) -> None:
    """In-place decoupled weight-decay Adam update for every parameter in ``grads``."""
    if t < 1:
        raise ValueError(f"adamw_step: step index must be >= 1, got {t}")
    lr = cfg.lr if lr is None else lr
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return int(math.ceil(warmup_ratio * total_steps))


def cosine_schedule(t: float, total_steps: int, warmup_ratio: float, peak_lr: float) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("cosine_schedule: total_steps must be positive")
    if not 0 <= t <= total_steps:
        raise ValueError(f"cosine_schedule: t={t} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, warmup_ratio)
    if t < w:
        return peak_lr * t / w
    span = total_steps - w
    if span == 0:
        return peak_lr
    progress = (t - w) / span
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
