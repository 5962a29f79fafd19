"""Similarity-threshold cleaning of (image_id, caption) corpora."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Protocol, Sequence, Tuple

import numpy as np

Record = Tuple[str, str]


class SimilarityScorer(Protocol):
    def score(self, caption: str, image_id: str) -> float: ...


class HashingScorer:
    """Deterministic pseudo-similarity in [-1, 1] from a hash of (caption, image_id)."""

    def __init__(self, salt: str = ""):
        self.salt = salt

    def score(self, caption: str, image_id: str) -> float:
        h = hashlib.sha256(f"{self.salt}\x00{image_id}\x00{caption}".encode()).digest()
        return int.from_bytes(h[:8], "big") / 2.0 ** 64 * 2.0 - 1.0


class TableScorer:
    def __init__(self, table: Dict[Record, float]):
        self.table = dict(table)

    def score(self, caption: str, image_id: str) -> float:
        return self.table[(image_id, caption)]


@dataclass
class CleanResult:
    kept: List[Record]
    dropped: List[Record]
    retention: float

    def row(self) -> Tuple[int, int, float]:
        """(original, cleaned, remaining %)."""
        return len(self.kept) + len(self.dropped), len(self.kept), self.retention


def clean_corpus(records: Sequence[Record], scorer: SimilarityScorer, threshold: float) -> CleanResult:
    """Keep records scoring >= threshold. Retention is a percentage rounded to 1 decimal (0.0 when empty)."""
    kept, dropped = [], []
    for image_id, caption in records:
        (kept if scorer.score(caption, image_id) >= threshold else dropped).append((image_id, caption))
    n = len(kept) + len(dropped)
    return CleanResult(kept, dropped, round(100.0 * len(kept) / n, 1) if n else 0.0)


def crafted_corpus(n: int = 1000, keep_fraction: float = 0.85, threshold: float = 0.3,
                   seed: int = 0) -> Tuple[List[Record], TableScorer]:
    """Corpus plus scorer where exactly round(n * keep_fraction) records score at or above threshold."""
    rng = np.random.default_rng([seed, 85])
    good = set(rng.permutation(n)[:int(round(n * keep_fraction))].tolist())
    records, table = [], {}
    for i in range(n):
        rec = (f"img-{i:06d}", f"synthetic caption {i}")
        if i in good:
            s = float(rng.uniform(threshold, 1.0))
        else:
            s = float(rng.uniform(-1.0, threshold))
            s = min(s, np.nextafter(threshold, -1.0))
        records.append(rec)
        table[rec] = s
    return records, TableScorer(table)
