"""CIDEr: consensus of TF-IDF weighted n-grams between a candidate and its references."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

from .text import tokenize


class CiderError(ValueError):
    pass


@dataclass
class CaptionCorpus:
    references: List[List[str]]
    candidates: List[str]
    n: int = 4

    def __post_init__(self):
        if len(self.references) != len(self.candidates):
            raise CiderError(f"{len(self.candidates)} candidates for {len(self.references)} reference lists")
        if len(self.candidates) < 2:
            raise CiderError("CIDEr needs at least 2 images for document frequencies to be defined")
        for i, refs in enumerate(self.references):
            if not refs:
                raise CiderError(f"image {i} has no references")
        if self.n < 1:
            raise CiderError(f"n-gram order must be >= 1, got {self.n}")


@dataclass
class CiderResult:
    per_image: List[float]
    mean: float


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _vector(counts: Counter, df: Counter, log_n: float) -> Tuple[Dict[tuple, float], float]:
    vec = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def _cosine(a, norm_a, b, norm_b) -> float:
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    small, large = (a, b) if len(a) <= len(b) else (b, a)
    return sum(v * large.get(g, 0.0) for g, v in small.items()) / (norm_a * norm_b)


def cider(corpus: CaptionCorpus) -> CiderResult:
    """Per-image score = 10 * mean over n=1..N of mean over references of tf-idf cosine.

    Document frequency counts images whose references contain the n-gram.
    """
    N = corpus.n
    cand = [tokenize(c) for c in corpus.candidates]
    refs = [[tokenize(r) for r in rs] for rs in corpus.references]
    log_n = math.log(float(len(cand)))
    scores = []
    per_order = [Counter() for _ in range(N)]
    for rs in refs:
        for k in range(N):
            seen = set()
            for r in rs:
                seen.update(ngrams(r, k + 1))
            per_order[k].update(seen)
    for c, rs in zip(cand, refs):
        total = 0.0
        for k in range(N):
            cv, cn = _vector(ngrams(c, k + 1), per_order[k], log_n)
            sims = []
            for r in rs:
                rv, rn = _vector(ngrams(r, k + 1), per_order[k], log_n)
                sims.append(_cosine(cv, cn, rv, rn))
            total += sum(sims) / len(sims)
        scores.append(10.0 * total / N)
    return CiderResult(per_image=scores, mean=sum(scores) / len(scores))
