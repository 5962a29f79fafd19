"""Extraction of (instruction, response) records from fenced json blocks."""
from __future__ import annotations

import json
import re
from typing import List

_FENCE = re.compile(r"```(?:json)?[ \t]*\n(.*?)\n?```", re.DOTALL)


class ParseError(ValueError):
    pass


def parse_fenced(text: str) -> List[dict]:
    """Records from the first fenced json block; a single object counts as one record."""
    m = _FENCE.search(text or "")
    if m is None:
        raise ParseError("no fenced json block in output")
    try:
        doc = json.loads(m.group(1))
    except json.JSONDecodeError as exc:
        raise ParseError(f"fenced block is not valid json: {exc}") from None
    records = doc if isinstance(doc, list) else [doc]
    if not records:
        raise ParseError("fenced block holds no records")
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise ParseError(f"record {i} is not an object")
        for key in ("instruction", "response"):
            if not isinstance(rec.get(key), str):
                raise ParseError(f"record {i} lacks a string {key!r}")
        turns = rec.get("turns")
        if turns is not None:
            if not isinstance(turns, list) or not all(
                    isinstance(t, dict) and isinstance(t.get("from"), str) and isinstance(t.get("value"), str)
                    for t in turns):
                raise ParseError(f"record {i} has malformed turns")
    return records
