"""JSONL and JSON persistence, written atomically."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, List

from .types import Exemplar, InstructionResponsePair, SymbolicImage


def dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_jsonl(path, rows: Iterable[dict]) -> Path:
    return atomic_write_text(path, "".join(dumps(r) + "\n" for r in rows))


def read_jsonl(path) -> List[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid json ({exc.msg})") from None
    return out


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n")


def read_images(path) -> List[SymbolicImage]:
    return [SymbolicImage.from_dict(d) for d in read_jsonl(path)]


def read_pairs(path) -> List[InstructionResponsePair]:
    return [InstructionResponsePair.from_dict(d) for d in read_jsonl(path)]


def load_seed_exemplars(path=None) -> List[Exemplar]:
    if path is None:
        from importlib import resources
        text = resources.files(__package__).joinpath("data", "seed_exemplars.jsonl").read_text(encoding="utf-8")
        return [Exemplar.from_dict(json.loads(l)) for l in text.splitlines() if l.strip()]
    return [Exemplar.from_dict(d) for d in read_jsonl(path)]
