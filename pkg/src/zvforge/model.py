"""The assembled vision-language model: vision adapter point, Q-Former, heads, projection, decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Tuple

import numpy as np

from . import tensor as T
from .adaptation import Profile, Stage, attach_lora
from .nn import Linear, Module
from .qformer import QFormer, QFormerConfig, QueryEmbeddings, ToyCausalDecoder
from .tensor import Tensor


@dataclass
class LoRAConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: Tuple[str, ...] = ("q", "k", "v", "o")
    profiles: Tuple[str, ...] = ("chat",)
    stages: Tuple[str, ...] = ("multitask", "scene")

    def __post_init__(self):
        from .qformer import ConfigError
        if self.rank < 1:
            raise ConfigError(f"lora.rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"lora.alpha must be > 0, got {self.alpha}")
        bad = set(self.targets) - {"q", "k", "v", "o"}
        if bad:
            raise ConfigError(f"lora.targets has unknown projection(s) {sorted(bad)}")
        for p in self.profiles:
            Profile(p)
        for s in self.stages:
            Stage(s)

    def enabled_for(self, stage, profile) -> bool:
        stage, profile = Stage(stage), Profile(profile)
        if profile is Profile.BASE:
            return False
        return profile.value in self.profiles and stage.value in self.stages


class VisionLanguageModel(Module):
    def __init__(self, config: QFormerConfig, seed: int = 0, temperature: float = 0.07):
        rng = np.random.default_rng(seed)
        self._config = config
        F = config.image_feat_dim
        self.vision = Linear(F, F, rng)
        self.vision.weight.data[...] = np.eye(F, dtype=self.vision.weight.data.dtype)
        self.queries = QueryEmbeddings(config, rng)
        self.qformer = QFormer(config, rng)
        self.itm_head = Linear(config.hidden_dim, 2, rng)
        self.temperature = T.parameter([temperature])
        self.projection = Linear(config.hidden_dim, config.decoder_dim, rng)
        self.decoder = ToyCausalDecoder(config, rng)
        self._lora_seed = seed + 7919

    @property
    def config(self) -> QFormerConfig:
        return self._config

    def attach_adapters(self, lora: LoRAConfig) -> List[str]:
        """Attach LoRA to the vision transform and decoder attention projections (idempotent)."""
        rng = np.random.default_rng(self._lora_seed)
        names = []
        if self.vision.lora is None:
            attach_lora(self.vision, lora.rank, lora.alpha, rng, target="vision")
        names.append("vision")
        for i, layer in enumerate(self.decoder.layers):
            for proj in lora.targets:
                lin = getattr(layer.attn, proj)
                if lin.lora is None:
                    attach_lora(lin, lora.rank, lora.alpha, rng, target=f"decoder.layers.{i}.attn.{proj}")
                names.append(f"decoder.layers.{i}.attn.{proj}")
        return names

    def has_adapters(self) -> bool:
        return self.vision.lora is not None

    def encode_images(self, images) -> Tensor:
        images = T.as_tensor(np.asarray(images, dtype=self.vision.weight.data.dtype)
                             if not isinstance(images, Tensor) else images)
        return self.vision(images)

    def param_dict(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = False) -> List[str]:
        """Copy matching arrays into parameters; returns names of parameters left untouched."""
        params = self.param_dict()
        unknown = sorted(set(arrays) - set(params))
        if unknown:
            raise KeyError(f"checkpoint has parameters the model does not: {unknown[:5]}")
        missing = sorted(set(params) - set(arrays))
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, arr in arrays.items():
            p = params[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)
        return missing
