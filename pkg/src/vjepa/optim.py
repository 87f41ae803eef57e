"""AdamW and the pretraining hyper-parameter schedules.

All schedules are computed over a *virtual* horizon of
``scale_factor * total_iters`` iterations while training stops at
``total_iters``, so the tail of each schedule is never reached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class ScheduleConfig:
    total_iters: int = 90000
    warmup_iters: int = 12000
    start_lr: float = 2e-4
    lr: float = 6.25e-4
    final_lr: float = 1e-6
    start_wd: float = 0.04
    final_wd: float = 0.4
    start_momentum: float = 0.998
    final_momentum: float = 1.0
    scale_factor: float = 1.25

    def __post_init__(self):
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ValueError(f"warmup_iters must lie in [0, total_iters], got {self.warmup_iters}")
        if self.scale_factor < 1:
            raise ValueError(f"scale_factor must be >= 1, got {self.scale_factor}")

    @property
    def virtual_iters(self) -> float:
        return self.scale_factor * self.total_iters

    @classmethod
    def scaled(cls, total_iters: int, **overrides) -> "ScheduleConfig":
        """Pretraining schedule with the warmup fraction of the 90k-iteration recipe."""
        warmup = int(round(total_iters * 12000 / 90000))
        return cls(total_iters=total_iters, warmup_iters=warmup, **overrides)


def _check_iter(cfg: ScheduleConfig, it: int):
    if not 0 <= it < cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters})")


def lr_at(cfg: ScheduleConfig, it: int) -> float:
    """Linear warmup from start_lr to lr, then cosine towards final_lr."""
    _check_iter(cfg, it)
    if it < cfg.warmup_iters:
        return cfg.start_lr + (cfg.lr - cfg.start_lr) * it / cfg.warmup_iters
    progress = (it - cfg.warmup_iters) / (cfg.virtual_iters - cfg.warmup_iters)
    return cfg.lr - (cfg.lr - cfg.final_lr) * 0.5 * (1.0 - math.cos(math.pi * progress))


def _linear(start: float, end: float, cfg: ScheduleConfig, it: int) -> float:
    _check_iter(cfg, it)
    value = start + (end - start) * it / cfg.virtual_iters
    return min(value, end) if end >= start else max(value, end)


def wd_at(cfg: ScheduleConfig, it: int) -> float:
    return _linear(cfg.start_wd, cfg.final_wd, cfg, it)


def momentum_at(cfg: ScheduleConfig, it: int) -> float:
    return _linear(cfg.start_momentum, cfg.final_momentum, cfg, it)


def layer_decay_lrs(base_lr: float, decay: float, depth: int) -> list[float]:
    """Per-block learning rates, earliest block first, with the head's rate last."""
    if not 0 < decay <= 1:
        raise ValueError(f"layer decay must lie in (0, 1], got {decay}")
    return [base_lr * decay ** (depth - i) for i in range(depth)] + [base_lr]


def decays(name: str, p: T.Tensor) -> bool:
    """Biases, norm gains, the mask token and probe queries are not decayed."""
    return p.ndim >= 2


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    Each parameter carries a learning-rate multiplier (for layer-wise decay)
    and a flag saying whether weight decay applies to it.
    """

    def __init__(self, named_params: dict[str, T.Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 lr_scale: dict[str, float] | None = None, check_finite: bool = False):
        self.params = dict(named_params)
        self.betas = betas
        self.eps = eps
        self.lr_scale = lr_scale or {}
        unknown = set(self.lr_scale) - set(self.params)
        if unknown:
            raise KeyError(f"learning-rate scales for unknown parameters: {sorted(unknown)[:3]}")
        self.check_finite = check_finite
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.decay = {k: decays(k, p) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float, wd: float):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise T.ShapeError(f"adamw: gradient shape {g.shape} does not match parameter {name} {p.shape}")
            if self.check_finite and not np.all(np.isfinite(g)):
                raise T.NonFiniteError(f"adamw: non-finite gradient for {name}")
            dt = p.data.dtype.type
            plr = lr * self.lr_scale.get(name, 1.0)
            m, v = self.m[name], self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            if self.decay[name] and wd:
                p.data *= dt(1.0 - plr * wd)
            denom = np.sqrt(v / dt(c2)) + dt(self.eps)
            p.data -= dt(plr / c1) * m / denom

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        out["step"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for k in self.params:
            self.m[k] = state[f"m.{k}"].astype(self.m[k].dtype)
            self.v[k] = state[f"v.{k}"].astype(self.v[k].dtype)
        self.step_count = int(state["step"][0])
