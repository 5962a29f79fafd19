"""One TOML file configures every subcommand: [qformer] [objectives] [lora] [train] [datagen] [eval]."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import LoRAConfig
from .objectives import ObjectivesConfig
from .qformer import ConfigError, QFormerConfig
from .trainer.optim import TrainConfig


@dataclass
class DatagenConfig:
    kind: str = "Conversation"
    rewrite: Optional[str] = None
    exemplars_per_job: int = 2
    num_images: int = 20
    target_language: str = "en"
    translate: bool = False
    retries: int = 2
    workers: int = 1
    rate_limit: Optional[float] = None
    threshold: float = 0.3
    client: str = "mock"
    endpoint: str = ""
    model: str = ""
    key_env: str = "TEACHER_API_KEY"
    timestamp: str = "1970-01-01T00:00:00Z"
    seed: int = 0

    def __post_init__(self):
        from .datagen.types import JobKind, Rewrite
        try:
            JobKind(self.kind)
            if self.rewrite is not None:
                Rewrite(self.rewrite)
        except ValueError as exc:
            raise ConfigError(f"datagen: {exc}") from None
        if self.target_language not in ("en", "zh"):
            raise ConfigError(f"datagen.target_language must be 'en' or 'zh', got {self.target_language!r}")
        if self.client not in ("mock", "http"):
            raise ConfigError(f"datagen.client must be 'mock' or 'http', got {self.client!r}")
        if not 1 <= self.exemplars_per_job <= 8:
            raise ConfigError("datagen.exemplars_per_job must be in [1, 8]")
        if self.retries < 0 or self.workers < 1 or self.num_images < 0:
            raise ConfigError("datagen.retries/num_images must be >= 0 and workers >= 1")


@dataclass
class EvalConfig:
    judge: str = "mock-overlap"
    k: int = 1
    cider_n: int = 4

    def __post_init__(self):
        if self.judge not in ("mock-constant", "mock-length", "mock-overlap"):
            raise ConfigError(f"eval.judge must be a mock judge, got {self.judge!r}")
        if self.k < 1 or self.cider_n < 1:
            raise ConfigError("eval.k and eval.cider_n must be >= 1")


SECTIONS = {"qformer": QFormerConfig, "objectives": ObjectivesConfig, "lora": LoRAConfig,
            "train": TrainConfig, "datagen": DatagenConfig, "eval": EvalConfig}


@dataclass
class Config:
    qformer: QFormerConfig = field(default_factory=QFormerConfig)
    objectives: ObjectivesConfig = field(default_factory=ObjectivesConfig)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    source: Optional[str] = None

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool) or isinstance(value, bool):
        if not isinstance(value, bool) or not isinstance(default, (bool, type(None))):
            raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def build_section(name: str, values: Dict[str, Any]):
    cls = SECTIONS[name]
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
        kwargs[key] = _coerce(name, key, value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def config_from_dict(doc: Dict[str, Any], source: Optional[str] = None) -> Config:
    for name, values in doc.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(values, dict):
            raise ConfigError(f"config section [{name}] must be a table")
    return Config(**{name: build_section(name, doc.get(name, {})) for name in SECTIONS}, source=source)


def load_config(path=None, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> Config:
    """Load a TOML config (defaults when path is None) and apply section-keyed overrides."""
    doc: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: invalid TOML ({exc})") from None
    for section, values in (overrides or {}).items():
        doc.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    return config_from_dict(doc, None if path is None else str(path))
