"""Synthetic image/caption corpus and instruction formatting for the toy vocabulary.

Token layout (vocab_size >= 40)::

    0 pad  1 bos  2 eos  3 sep
    4 '<'  5 '>'  6 ','  7..16 digits 0-9          box serialisation
    17..20 task markers (caption, vqa, grounding, grounded caption)
    21 user  22 assistant  23..25 attribute questions
    26..   content words, split into an "en" and a "zh" range
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..objectives import Batch
from ..qformer import BOS, EOS, PAD, SEP

BOX_OPEN, BOX_CLOSE, COMMA = 4, 5, 6
DIGIT0 = 7
TASK_TOKENS = {"captioning": 17, "vqa": 18, "grounding": 19, "grounded_caption": 20}
USER, ASSISTANT = 21, 22
ATTRIBUTE_QUESTIONS = (23, 24, 25)
FIRST_WORD = 26
TASKS = tuple(TASK_TOKENS)
CAPTION_WORDS = 3
GRID = 100

# Published per-task sample counts (millions), used by the optional size-proportional mix.
TASK_SIZES = {"captioning": 8.8, "vqa": 4.5, "grounding": 7.0, "grounded_caption": 7.0}


class MalformedRecordError(ValueError):
    pass


def word_ranges(vocab_size: int) -> Dict[str, range]:
    n = vocab_size - FIRST_WORD
    if n < 2 * (CAPTION_WORDS + 4):
        raise ValueError(f"vocab_size {vocab_size} too small for the synthetic word ranges")
    half = n // 2
    return {"en": range(FIRST_WORD, FIRST_WORD + half), "zh": range(FIRST_WORD + half, FIRST_WORD + 2 * half)}


# -- boxes ---------------------------------------------------------------------

def quantize(x: float) -> int:
    if not 0.0 <= x <= 1.0:
        raise MalformedRecordError(f"box coordinate {x} outside [0, 1]")
    return min(GRID - 1, int(math.floor(x * GRID + 1e-9)))


def serialize_box(box: Sequence[float]) -> List[int]:
    """(x1, y1, x2, y2) in [0, 1] -> tokens for '<x1,y1,x2,y2>' on the 0-99 grid."""
    if len(box) != 4:
        raise MalformedRecordError(f"box needs 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise MalformedRecordError(f"degenerate box {tuple(box)}")
    out = [BOX_OPEN]
    for i, c in enumerate(box):
        if i:
            out.append(COMMA)
        out.extend(DIGIT0 + int(d) for d in str(quantize(c)))
    out.append(BOX_CLOSE)
    return out


def parse_box(tokens: Sequence[int]) -> Tuple[int, int, int, int]:
    tokens = list(tokens)
    if len(tokens) < 9 or tokens[0] != BOX_OPEN or tokens[-1] != BOX_CLOSE:
        raise MalformedRecordError(f"not a serialized box: {tokens}")
    coords, digits = [], []
    for tok in tokens[1:-1] + [COMMA]:
        if tok == COMMA:
            if not digits:
                raise MalformedRecordError(f"empty coordinate in {tokens}")
            coords.append(int("".join(digits)))
            digits = []
        elif DIGIT0 <= tok < DIGIT0 + 10:
            digits.append(str(tok - DIGIT0))
        else:
            raise MalformedRecordError(f"unexpected token {tok} inside box")
    if len(coords) != 4:
        raise MalformedRecordError(f"expected 4 coordinates, got {len(coords)}")
    return tuple(coords)


# -- instruction formatting -------------------------------------------------------

def _field(record: dict, key: str, task: str):
    if key not in record:
        raise MalformedRecordError(f"{task} record is missing field {key!r}")
    return record[key]


def _words(seq, key: str) -> List[int]:
    seq = [int(t) for t in seq]
    if not seq:
        raise MalformedRecordError(f"field {key!r} is empty")
    return seq


def _ensure_eos(seq: List[int]) -> List[int]:
    return seq if seq and seq[-1] == EOS else seq + [EOS]


def format_multitask_example(task: str, record: dict) -> Tuple[List[int], List[bool]]:
    """Instruction + response tokens, with loss_mask True on the response only."""
    if task not in TASK_TOKENS:
        raise MalformedRecordError(f"unknown task {task!r}")
    head = [TASK_TOKENS[task]]
    if task == "captioning":
        instruction = head + [SEP]
        response = _ensure_eos(_words(_field(record, "caption", task), "caption"))
    elif task == "vqa":
        instruction = head + _words(_field(record, "question", task), "question") + [SEP]
        response = _ensure_eos(_words(_field(record, "answer", task), "answer"))
    elif task == "grounding":
        instruction = head + _words(_field(record, "phrase", task), "phrase") + [SEP]
        response = serialize_box(_field(record, "box", task)) + [EOS]
    else:
        instruction = head + serialize_box(_field(record, "box", task)) + [SEP]
        response = _ensure_eos(_words(_field(record, "phrase", task), "phrase"))
    tokens = instruction + response
    return tokens, [False] * len(instruction) + [True] * len(response)


def format_dialogue(turns: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> Tuple[List[int], List[bool]]:
    """Multi-turn [user] instruction [assistant] response ... with loss on responses."""
    if not turns:
        raise MalformedRecordError("dialogue has no turns")
    tokens, mask = [], []
    for instr, resp in turns:
        instr, resp = list(instr), list(resp)
        tokens += [USER] + instr + [ASSISTANT]
        mask += [False] * (len(instr) + 2)
        tokens += resp
        mask += [True] * len(resp)
    if tokens[-1] != EOS:
        tokens.append(EOS)
        mask.append(True)
    return tokens, mask


def split_instruction(tokens: Sequence[int], mask: Sequence[bool]) -> List[int]:
    """Leading masked tokens, i.e. the instruction that precedes the first response token."""
    out = []
    for tok, m in zip(tokens, mask):
        if m:
            break
        out.append(tok)
    return out


# -- corpus -----------------------------------------------------------------------

@dataclass
class ConceptSpec:
    captions: Dict[str, List[int]]
    box: Tuple[float, float, float, float]


class SyntheticCorpus:
    """K concepts, each a feature grid centroid plus a caption per language and a box."""

    def __init__(self, num_concepts: int, image_patches: int, image_feat_dim: int, vocab_size: int,
                 seed: int = 0, noise: float = 0.5, margin: float = None):
        self.num_concepts = K = num_concepts
        self.image_patches = image_patches
        self.image_feat_dim = image_feat_dim
        self.noise = noise
        rng = np.random.default_rng([seed, 104729])
        self.centroids = rng.normal(0.0, 1.0, size=(K, image_patches, image_feat_dim))
        flat = self.centroids.reshape(K, -1)
        dists = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
        self.min_distance = float(dists[~np.eye(K, dtype=bool)].min()) if K > 1 else math.inf
        self.margin = 0.5 * math.sqrt(2.0 * image_patches * image_feat_dim) if margin is None else margin
        if self.min_distance < self.margin:
            raise ValueError(f"concept centroids too close: {self.min_distance:.3f} < margin {self.margin:.3f}")
        ranges = word_ranges(vocab_size)
        self.concepts: List[ConceptSpec] = []
        used = {lang: set() for lang in ranges}
        for _ in range(K):
            caps = {}
            for lang, r in ranges.items():
                while True:
                    words = tuple(int(w) for w in rng.choice(list(r), size=CAPTION_WORDS, replace=False))
                    if words not in used[lang]:
                        used[lang].add(words)
                        break
                caps[lang] = list(words) + [EOS]
            x1, y1 = rng.uniform(0.0, 0.6, size=2)
            w, h = rng.uniform(0.1, 0.39, size=2)
            box = (round(float(x1), 2), round(float(y1), 2), round(float(x1 + w), 2), round(float(y1 + h), 2))
            self.concepts.append(ConceptSpec(captions=caps, box=box))

    def images(self, concepts: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        concepts = np.asarray(concepts, dtype=np.int64)
        noise = rng.normal(0.0, self.noise, size=(len(concepts), self.image_patches, self.image_feat_dim))
        return self.centroids[concepts] + noise

    def draw_concepts(self, size: int, rng: np.random.Generator) -> np.ndarray:
        if size <= self.num_concepts:
            return rng.permutation(self.num_concepts)[:size]
        return rng.integers(0, self.num_concepts, size=size)

    def batch(self, size: int, rng: np.random.Generator) -> Tuple[Batch, np.ndarray]:
        concepts = self.draw_concepts(size, rng)
        langs = rng.integers(0, 2, size=len(concepts))
        caps = [list(self.concepts[k].captions["en" if l == 0 else "zh"]) for k, l in zip(concepts, langs)]
        return Batch(images=self.images(concepts, rng), captions=caps), concepts

    def eval_batch(self, seed: int = 12345) -> Batch:
        """One example of every concept, fresh noise, alternating caption language."""
        rng = np.random.default_rng([seed, 7])
        concepts = np.arange(self.num_concepts)
        caps = [list(self.concepts[k].captions["en" if k % 2 == 0 else "zh"]) for k in concepts]
        return Batch(images=self.images(concepts, rng), captions=caps)

    # records for the instruction-tuning stages
    def record(self, task: str, concept: int, lang: str, rng: np.random.Generator) -> dict:
        spec = self.concepts[concept]
        caption = spec.captions[lang]
        if task == "captioning":
            return {"caption": list(caption)}
        if task == "vqa":
            i = int(rng.integers(0, len(ATTRIBUTE_QUESTIONS)))
            return {"question": [ATTRIBUTE_QUESTIONS[i]], "answer": [caption[i], EOS]}
        if task == "grounding":
            return {"phrase": list(caption[:-1]), "box": spec.box}
        if task == "grounded_caption":
            return {"box": spec.box, "phrase": list(caption[:-1])}
        raise MalformedRecordError(f"unknown task {task!r}")

    def task_probabilities(self, sampling: str) -> np.ndarray:
        if sampling == "uniform":
            return np.full(len(TASKS), 1.0 / len(TASKS))
        sizes = np.array([TASK_SIZES[t] for t in TASKS])
        return sizes / sizes.sum()

    def multitask_batch(self, size: int, rng: np.random.Generator, sampling: str = "uniform"):
        concepts = self.draw_concepts(size, rng)
        tasks = rng.choice(len(TASKS), size=len(concepts), p=self.task_probabilities(sampling))
        seqs = []
        for k, t in zip(concepts, tasks):
            lang = "en" if rng.integers(0, 2) == 0 else "zh"
            seqs.append(format_multitask_example(TASKS[t], self.record(TASKS[t], int(k), lang, rng)))
        return self.images(concepts, rng), seqs

    def dialogue_batch(self, size: int, rng: np.random.Generator):
        concepts = self.draw_concepts(size, rng)
        seqs = []
        for k in concepts:
            lang = "en" if rng.integers(0, 2) == 0 else "zh"
            turns = []
            for task in ("captioning", "vqa"):
                toks, mask = format_multitask_example(task, self.record(task, int(k), lang, rng))
                instr = split_instruction(toks, mask)
                turns.append((instr, toks[len(instr):]))
            seqs.append(format_dialogue(turns))
        return self.images(concepts, rng), seqs
