"""Teacher-model clients: a deterministic mock, failure-injecting wrappers, and an HTTP client."""
from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import urllib.error
import urllib.request
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np

from .parser import ParseError, parse_fenced
from .prompts import LANGUAGE_NAMES, fenced, load_template, _KIND_FILES, _snake
from .types import JobKind, Rewrite


class TeacherError(RuntimeError):
    pass


class TeacherClient(Protocol):
    identity: str

    def complete(self, system: str, messages: List[Dict[str, str]]) -> str: ...


_WORD = re.compile(r"[A-Za-z]+")
CJK_BASE, CJK_SPAN = 0x4E00, 0x5000


def pseudo_cjk(text: str) -> str:
    """Deterministic stand-in translation: each latin word becomes 1-2 CJK ideographs."""
    def word(m):
        h = hashlib.sha256(m.group(0).lower().encode()).digest()
        n = 1 + h[0] % 2
        return "".join(chr(CJK_BASE + int.from_bytes(h[1 + 2 * i:3 + 2 * i], "big") % CJK_SPAN) for i in range(n))
    return re.sub(r"(?<=[一-鿿]) (?=[一-鿿])", "", _WORD.sub(word, text))


def _translate_record(rec, fn):
    if isinstance(rec, str):
        return fn(rec)
    if isinstance(rec, list):
        return [_translate_record(r, fn) for r in rec]
    if isinstance(rec, dict):
        return {k: (v if k == "from" else _translate_record(v, fn)) for k, v in rec.items()}
    return rec


def _target_language(system: str) -> str:
    for code, name in LANGUAGE_NAMES.items():
        if f"Write all text in {name}." in system:
            return code
    return "en"


def _kind_of(system: str) -> JobKind:
    for kind, name in _KIND_FILES.items():
        if system.startswith(load_template(name)):
            return kind
    raise TeacherError("system message matches no known template")


def _rewrite_of(system: str) -> Optional[Rewrite]:
    for r in Rewrite:
        if load_template("rewrite_" + _snake(r.value)) in system:
            return r
    return None


def _parse_user(content: str):
    captions, boxes, section = [], [], None
    for line in content.splitlines():
        if line in ("Captions:", "Boxes:"):
            section = line
        elif section == "Captions:":
            captions.append(line)
        elif section == "Boxes:" and ":(" in line:
            tag, coords = line.split(":(", 1)
            boxes.append((tag, "(" + coords))
    return captions, boxes


_REWRITE_PREFIX = {Rewrite.DEEPENING: "Looking more closely, ", Rewrite.CONCRETIZING: "Specifically, ",
                   Rewrite.INCREASING_REASONING: "Step by step, ", Rewrite.ADDING_CONSTRAINTS: "In one sentence, "}


class MockTeacherClient:
    """Output is a pure function of (system, messages).

    A final user turn holding a fenced record is translated; otherwise records are
    generated from the captions and boxes of the query.
    """

    def __init__(self, identity: str = "mock-teacher-v1"):
        self.identity = identity

    def complete(self, system: str, messages: List[Dict[str, str]]) -> str:
        if not messages or messages[-1].get("role") != "user":
            raise TeacherError("conversation must end with a user turn")
        digest = hashlib.sha256((system + "\x00" + json.dumps(messages, sort_keys=True, ensure_ascii=False))
                                .encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        lang = _target_language(system)
        last = messages[-1]["content"]
        try:
            source = parse_fenced(last)
        except ParseError:
            source = None
        if source is not None:
            fn = pseudo_cjk if lang == "zh" else (lambda s: s)
            return "Translation:\n" + fenced(_translate_record(source[0], fn))
        records = self._generate(_kind_of(system), _rewrite_of(system), _parse_user(last), rng)
        if lang == "zh":
            records = _translate_record(records, pseudo_cjk)
        return "Here are the generated records.\n" + fenced(records)

    def _generate(self, kind, rewrite, parsed, rng) -> List[dict]:
        captions, boxes = parsed
        if not captions:
            raise TeacherError("query has no captions")
        cap = captions[int(rng.integers(len(captions)))].rstrip(".")
        prefix = _REWRITE_PREFIX.get(rewrite, "")
        if kind is JobKind.CONVERSATION:
            turns = [("user", prefix + "What is happening in this picture?"), ("assistant", cap + ".")]
            for tag, coords in boxes[:2]:
                turns += [("user", f"Where is the {tag}?"), ("assistant", f"The {tag} is at {coords}.")]
            return [{"instruction": turns[0][1], "response": turns[1][1],
                     "turns": [{"from": s, "value": v} for s, v in turns]}]
        if kind is JobKind.DETAIL:
            objs = "; ".join(f"a {tag} at {coords}" for tag, coords in boxes)
            text = ". ".join(c.rstrip(".") for c in captions) + "."
            if objs:
                text += f" The scene contains {objs}."
            variants = ("Describe the image in detail.", "Give a thorough description of this picture.")
            return [{"instruction": prefix + variants[int(rng.integers(2))], "response": text}]
        tag = boxes[int(rng.integers(len(boxes)))][0] if boxes else "scene"
        return [{"instruction": prefix + f"Why might the {tag} be part of this scene?",
                 "response": f"The image shows {cap.lower()}, so the {tag} most likely belongs to that activity."}]


class ProseClient:
    """Answers in prose with no fenced block."""

    def __init__(self, identity: str = "mock-prose"):
        self.identity = identity

    def complete(self, system, messages) -> str:
        return "Sure! The picture shows a pleasant scene with several objects in it."


class EchoTranslator:
    """Returns the final user turn unchanged, i.e. an untranslated record."""

    def __init__(self, identity: str = "mock-echo"):
        self.identity = identity

    def complete(self, system, messages) -> str:
        return messages[-1]["content"]


class FailingEveryNthClient:
    """Raises TeacherError on every n-th call, delegating otherwise."""

    def __init__(self, inner, n: int):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.inner, self.n = inner, n
        self.identity = f"{inner.identity}+fail{n}"
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, system, messages) -> str:
        with self._lock:
            self.calls += 1
            k = self.calls
        if k % self.n == 0:
            raise TeacherError(f"injected failure on call {k}")
        return self.inner.complete(system, messages)


class HttpTeacherClient:
    """Chat-completions style endpoint; the credential is read from the named environment variable."""

    def __init__(self, endpoint: str, model: str, key_env: str = "TEACHER_API_KEY", timeout: float = 60.0):
        self.endpoint, self.model, self.key_env, self.timeout = endpoint, model, key_env, timeout
        self.identity = f"http:{model}"

    def complete(self, system, messages) -> str:
        key = os.environ.get(self.key_env)
        if not key:
            raise TeacherError(f"environment variable {self.key_env} is not set")
        body = json.dumps({"model": self.model, "temperature": 0,
                           "messages": [{"role": "system", "content": system}] + list(messages)}).encode()
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json",
                                              "Authorization": f"Bearer {key}"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                doc = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TeacherError(f"{self.endpoint}: {exc}") from None
        try:
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise TeacherError(f"{self.endpoint}: unexpected response shape") from None
