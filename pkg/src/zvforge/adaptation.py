"""LoRA adapters and the per-stage trainable-parameter policy."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Tuple

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor


class Stage(enum.Enum):
    PRETRAIN = "pretrain"
    MULTITASK = "multitask"
    SCENE_AWARE = "scene"


class Profile(enum.Enum):
    BASE = "base"
    CHAT = "chat"


STAGE_ORDER = (Stage.PRETRAIN, Stage.MULTITASK, Stage.SCENE_AWARE)

PARAMETER_GROUPS = ("queries", "qformer", "itm_head", "temperature", "vision",
                    "projection", "decoder", "lora_vision", "lora_decoder")


class LoRAAdapter(Module):
    """Low-rank delta ``(alpha / rank) * B @ A`` for a [d_out, d_in] linear map."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 rng: np.random.Generator, target: str = ""):
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} must be in [1, min({d_in}, {d_out})]")
        if alpha <= 0:
            raise ValueError(f"LoRA alpha must be positive, got {alpha}")
        self.A = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(rank, d_in)))
        self.B = T.parameter(np.zeros((d_out, rank)))
        self._rank = rank
        self._alpha = float(alpha)
        self._target = target

    @property
    def rank(self) -> int:
        return self._rank

    @property
    def alpha(self) -> float:
        return self._alpha

    @property
    def target(self) -> str:
        return self._target

    @property
    def scale(self) -> float:
        return self._alpha / self._rank

    def delta(self, x: Tensor) -> Tensor:
        return T.linear(T.linear(x, self.A), self.B) * self.scale

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))


def attach_lora(linear: Linear, rank: int, alpha: float, rng: np.random.Generator,
                target: str = "") -> LoRAAdapter:
    adapter = LoRAAdapter(linear.d_in, linear.d_out, min(rank, linear.d_in, linear.d_out), alpha, rng, target)
    linear.lora = adapter
    return adapter


def lora_forward(base: Linear, adapter: LoRAAdapter, x: Tensor) -> Tensor:
    """``W x + b + (alpha/r) B (A x)`` with the base weight held frozen."""
    x = T.as_tensor(x)
    if x.shape[-1] != base.d_in or adapter.A.shape[1] != base.d_in or adapter.B.shape[0] != base.d_out:
        raise T.DimensionError(
            f"lora_forward: input {x.shape}, base {base.weight.shape}, "
            f"A {adapter.A.shape}, B {adapter.B.shape} do not agree")
    frozen_w = base.weight.detach()
    frozen_b = None if base.bias is None else base.bias.detach()
    return T.linear(x, frozen_w, frozen_b) + adapter.delta(x)


def merge(base: Linear, adapter: LoRAAdapter) -> Linear:
    """New Linear with ``W' = W + (alpha/r) B A`` and no adapter attached."""
    if adapter.B.shape[0] != base.d_out or adapter.A.shape[1] != base.d_in:
        raise T.DimensionError(
            f"merge: base {base.weight.shape} vs adapter A {adapter.A.shape}, B {adapter.B.shape}")
    merged = Linear.__new__(Linear)
    w = base.weight.data.astype(np.float64) + adapter.delta_weight()
    merged.weight = T.Tensor(w.astype(base.weight.data.dtype), requires_grad=base.weight.requires_grad)
    merged.bias = None if base.bias is None else T.Tensor(base.bias.data.copy(), requires_grad=base.bias.requires_grad)
    merged.lora = None
    return merged


@dataclass(frozen=True)
class TrainableSet:
    stage: Stage
    profile: Profile
    open: FrozenSet[str]

    def is_open(self, group: str) -> bool:
        return group in self.open


def resolve_trainable(stage, profile, lora_stages: Iterable = (Stage.MULTITASK, Stage.SCENE_AWARE)) -> TrainableSet:
    """Parameter groups that receive updates for a (stage, profile) pair.

    ``lora_stages`` lists the Chat stages with LoRA enabled; by default both
    instruction-tuning stages.
    """
    try:
        stage = Stage(stage)
        profile = Profile(profile)
    except ValueError as exc:
        raise ValueError(f"unknown stage/profile: {exc}") from None
    lora_stages = {Stage(s) for s in lora_stages}
    if stage is Stage.PRETRAIN:
        groups = {"qformer", "queries", "itm_head", "temperature"}
    elif stage is Stage.MULTITASK:
        groups = {"projection"}
    else:
        groups = {"qformer", "queries", "projection"}
    if profile is Profile.CHAT and stage in lora_stages and stage is not Stage.PRETRAIN:
        groups |= {"lora_vision", "lora_decoder"}
    return TrainableSet(stage, profile, frozenset(groups))


def group_of(name: str) -> str:
    """Parameter group for a dotted parameter name."""
    if name.startswith("lora.vision"):
        return "lora_vision"
    if name.startswith("lora.decoder"):
        return "lora_decoder"
    head = name.split(".", 1)[0]
    if head not in PARAMETER_GROUPS:
        raise KeyError(f"parameter {name!r} belongs to no known group")
    return head


def apply_trainable(named: Iterable[Tuple[str, Tensor]], trainable: TrainableSet) -> Dict[str, Tensor]:
    """Set ``requires_grad`` per group; return the open parameters by name."""
    open_params = {}
    for name, p in named:
        p.requires_grad = trainable.is_open(group_of(name))
        p.grad = None
        if p.requires_grad:
            open_params[name] = p
    return open_params
