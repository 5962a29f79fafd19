"""Rule-based filters over generated pairs. Every rule is a pure predicate returning True on violation."""
from __future__ import annotations

import re
from typing import Callable, Dict, Iterable, Optional, Sequence

from .types import InstructionResponsePair, JobKind, Verdict

INSTRUCTION_CHARS = (4, 512)
RESPONSE_CHARS = (1, 4096)
SCRIPT_SHARE = 0.8
REFUSALS = ("as an ai", "as a language model", "i'm sorry, but", "i am sorry, but", "i cannot assist",
            "i can't assist", "作为一个人工智能", "作为ai", "我无法")

_NUM = r"\s*(-?\d+(?:\.\d+)?)\s*"
_TUPLE = re.compile(r"[(\[]" + ",".join([_NUM] * 4) + r"[)\]]")


def is_cjk(ch: str) -> bool:
    o = ord(ch)
    return (0x4E00 <= o <= 0x9FFF or 0x3400 <= o <= 0x4DBF or 0xF900 <= o <= 0xFAFF
            or 0x20000 <= o <= 0x2A6DF)


def script_share(text: str, language: str) -> Optional[float]:
    """Share of letters in the script of ``language``; None when the text has no letters."""
    letters = [c for c in text if c.isalpha()]
    if not letters:
        return None
    if language == "zh":
        hits = sum(is_cjk(c) for c in letters)
    else:
        hits = sum(c.isascii() for c in letters)
    return hits / len(letters)


def _texts(pair: InstructionResponsePair):
    yield pair.instruction
    yield pair.response
    for _, v in pair.turns or ():
        yield v


def r1_length(pair, kind, language) -> bool:
    lo, hi = INSTRUCTION_CHARS
    rlo, rhi = RESPONSE_CHARS
    return not (lo <= len(pair.instruction) <= hi and rlo <= len(pair.response) <= rhi)


def r2_language(pair, kind, language) -> bool:
    share = script_share(pair.response, language or pair.language)
    return share is not None and share < SCRIPT_SHARE


def r3_refusal(pair, kind, language) -> bool:
    return any(p in t.lower() for t in _texts(pair) for p in REFUSALS)


def r4_boxes(pair, kind, language) -> bool:
    for text in _texts(pair):
        for m in _TUPLE.finditer(text):
            x1, y1, x2, y2 = (float(g) for g in m.groups())
            if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
                return True
    return False


def r5_distinct(pair, kind, language) -> bool:
    return pair.instruction.strip().casefold() == pair.response.strip().casefold()


def r6_turns(pair, kind, language) -> bool:
    if kind is None or JobKind(kind) is not JobKind.CONVERSATION:
        return False
    turns = pair.turns
    if not turns or len(turns) % 2:
        return True
    for i, (speaker, value) in enumerate(turns):
        if speaker != ("user" if i % 2 == 0 else "assistant") or not value.strip():
            return True
    return False


Rule = Callable[[InstructionResponsePair, Optional[JobKind], Optional[str]], bool]
DEFAULT_RULES: Dict[str, Rule] = {"R1": r1_length, "R2": r2_language, "R3": r3_refusal,
                                  "R4": r4_boxes, "R5": r5_distinct, "R6": r6_turns}


def apply_filters(pair: InstructionResponsePair, rules: Optional[Dict[str, Rule]] = None,
                  kind: Optional[JobKind] = None, target_language: Optional[str] = None) -> Verdict:
    """Verdict listing every violated rule id (sorted). kind defaults to the pair's provenance kind."""
    rules = DEFAULT_RULES if rules is None else rules
    if kind is None and pair.provenance is not None:
        kind = pair.provenance.kind
    failed = tuple(sorted(rid for rid, rule in rules.items() if rule(pair, kind, target_language)))
    return Verdict(passed=not failed, failed_rules=failed)
