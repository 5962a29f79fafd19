"""In-context prompt assembly from versioned system templates."""
from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Tuple

from .types import Exemplar, GenerationJob, InstructionResponsePair, JobKind, Rewrite, SymbolicImage

TEMPLATE_VERSION = "v1"
LANGUAGE_NAMES = {"en": "English", "zh": "Chinese"}

_KIND_FILES = {JobKind.CONVERSATION: "conversation", JobKind.DETAIL: "detail_description",
               JobKind.REASONING: "complex_reasoning", JobKind.TRANSLATION: "translation"}


def _snake(name: str) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", name).lower()


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    path = resources.files(__package__).joinpath("templates", version, f"{name}.txt")
    try:
        return path.read_text(encoding="utf-8").strip()
    except FileNotFoundError:
        raise FileNotFoundError(f"missing prompt template {version}/{name}.txt") from None


def system_message(kind: JobKind, rewrite=None, target_language: str = "en",
                   version: str = TEMPLATE_VERSION) -> str:
    parts = [load_template(_KIND_FILES[JobKind(kind)], version)]
    if rewrite is not None:
        parts.append(load_template("rewrite_" + _snake(Rewrite(rewrite).value), version))
    parts.append(f"Write all text in {LANGUAGE_NAMES[target_language]}.")
    return "\n\n".join(parts)


def serialize_boxes(image: SymbolicImage) -> str:
    return "\n".join(f"{b.tag}:({b.x1:.3f},{b.y1:.3f},{b.x2:.3f},{b.y2:.3f})" for b in image.boxes)


def user_content(image: SymbolicImage) -> str:
    lines = ["Captions:"] + list(image.captions) + ["Boxes:"]
    boxes = serialize_boxes(image)
    if boxes:
        lines.append(boxes)
    return "\n".join(lines)


def fenced(obj) -> str:
    return "```json\n" + json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n```"


def _record(instruction: str, response: str, turns) -> Dict:
    rec = {"instruction": instruction, "response": response}
    if turns is not None:
        rec["turns"] = [{"from": s, "value": v} for s, v in turns]
    return rec


def assistant_content(ex: Exemplar) -> str:
    return fenced([_record(ex.instruction, ex.response, ex.turns)])


def pair_content(pair: InstructionResponsePair) -> str:
    return fenced(_record(pair.instruction, pair.response, pair.turns))


def build_prompt(job: GenerationJob, version: str = TEMPLATE_VERSION) -> Tuple[str, List[Dict[str, str]]]:
    """(system message, messages): User/Assistant per exemplar, then the query as a final User turn.

    Rewrite clauses apply to generation jobs only.
    """
    job.validate()
    system = system_message(job.kind, None if job.kind is JobKind.TRANSLATION else job.rewrite,
                            job.target_language, version)
    messages: List[Dict[str, str]] = []
    for ex in job.exemplars:
        messages.append({"role": "user", "content": user_content(ex.image)})
        messages.append({"role": "assistant", "content": assistant_content(ex)})
    if job.kind is JobKind.TRANSLATION:
        messages.append({"role": "user", "content": pair_content(job.query)})
    else:
        messages.append({"role": "user", "content": user_content(job.query)})
    return system, messages
