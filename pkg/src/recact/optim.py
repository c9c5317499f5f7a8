"""AdamW with decoupled weight decay, warmup+cosine schedule, gradient
clipping, and a central-finite-difference gradient oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class GradientError(RuntimeError):
    """Raised for missing or non-finite gradients."""


@dataclass
class ScheduleConfig:
    total_steps: int
    peak_lr: float = 1e-4
    warmup_steps: int = 4000
    final_lr: float = 1e-6

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})"
            )
        if self.final_lr > self.peak_lr:
            raise ValueError("final_lr must not exceed peak_lr")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to final_lr at total_steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.final_lr
    t = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * t))


@dataclass
class ParamSet:
    """Named parameters plus AdamW moment buffers and a shared step counter."""

    params: dict[str, Tensor]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
            if name not in self.v:
                self.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_values(self) -> int:
        return sum(p.size for p in self.params.values())


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 0.25) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm.

    Returns the factor that was applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = 0.0
    for name, g in grads.items():
        s = float(np.sum(np.square(g, dtype=np.float64)))
        if not math.isfinite(s):
            raise GradientError(f"non-finite gradient for parameter '{name}'")
        sq += s
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in grads.values():
        g *= factor
    return factor


def adamw_step(
    pset: ParamSet,
    lr: float,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update using the gradients stored on
    the parameters. Bias correction uses the incremented step counter."""
    b1, b2 = betas
    pset.step += 1
    t = pset.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in pset.params.items():
        if p.grad is None:
            raise GradientError(f"missing gradient for parameter '{name}'")
        g = p.grad
        if weight_decay != 0.0:
            p.data *= 1.0 - lr * weight_decay
        m = pset.m[name]
        v = pset.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h*e_i) - f(x-h*e_i)) / 2h for every coordinate.

    f takes an ndarray shaped like x and returns a float. This is the
    independent oracle the reverse-mode gradients are checked against.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(
                f"non-finite function value near coordinate {np.unravel_index(i, x.shape)}"
            )
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
