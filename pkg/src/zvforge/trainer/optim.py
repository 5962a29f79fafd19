"""AdamW with decoupled weight decay, and global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from ..qformer import ConfigError
from ..tensor import Tensor


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    beta1: float = 0.9
    # Kept at 0.9 as published; 0.999 is the more common choice.
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 5e-2
    grad_clip: float = 2.0
    clip_enabled: bool = True
    batch_size: int = 16
    max_steps: int = 2000
    multitask_steps: Optional[int] = None
    scene_steps: Optional[int] = None
    eval_interval: int = 50
    seed: int = 0
    task_sampling: str = "uniform"
    num_concepts: int = 16
    image_noise: float = 0.5

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"train.{name} must be in (0, 1), got {v}")
        for name in ("lr", "eps", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if self.batch_size < 1 or self.eval_interval < 1 or self.num_concepts < 2:
            raise ConfigError("train.batch_size/eval_interval must be >= 1 and num_concepts >= 2")
        for name in ("max_steps", "multitask_steps", "scene_steps"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"train.{name} must be >= 0, got {v}")
        if self.task_sampling not in ("uniform", "by_size"):
            raise ConfigError(f"train.task_sampling must be 'uniform' or 'by_size', got {self.task_sampling!r}")

    def steps_for(self, stage) -> int:
        value = getattr(stage, "value", stage)
        if value == "multitask" and self.multitask_steps is not None:
            return self.multitask_steps
        if value == "scene" and self.scene_steps is not None:
            return self.scene_steps
        return self.max_steps


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients by max_norm / g when the global L2 norm g exceeds max_norm.

    Returns the norm measured before clipping.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    grads = [p.grad for p in tensors if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for p in tensors:
            if p.grad is not None:
                p.grad = (p.grad.astype(np.float64) * scale).astype(p.grad.dtype)
    return total


def adamw_step(params: Mapping[str, Tensor], opt: OptimizerState, cfg: TrainConfig) -> None:
    """One bias-corrected AdamW update of every open parameter holding a gradient."""
    live = {n: p for n, p in params.items() if p.requires_grad and p.grad is not None}
    for name, p in live.items():
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
            raise NonFiniteGradientError(
                f"parameter {name} (shape {p.shape}) has {bad} non-finite gradient entries at step {opt.t + 1}")
    opt.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for name, p in live.items():
        g = p.grad.astype(np.float64)
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        w = p.data.astype(np.float64)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * w
        p.data = (w - cfg.lr * update).astype(p.data.dtype)
