"""Recall@k for paired image-text similarity matrices."""
from __future__ import annotations

from typing import Tuple

import numpy as np


def _ranks(scores: np.ndarray) -> np.ndarray:
    """Rank (0 = best) of the diagonal entry within each row; ties go to the lower index."""
    B = scores.shape[0]
    diag = scores[np.arange(B), np.arange(B)][:, None]
    higher = (scores > diag).sum(axis=1)
    cols = np.arange(B)[None, :]
    tied_before = ((scores == diag) & (cols < np.arange(B)[:, None])).sum(axis=1)
    return higher + tied_before


def retrieval_at_k(sim, k: int = 1) -> Tuple[float, float]:
    """(IR@k, TR@k) where sim[i, j] scores image i against text j and the diagonal is positive.

    IR@k: fraction of texts whose own image ranks in the top k of its column.
    TR@k: fraction of images whose own text ranks in the top k of its row.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"retrieval needs a square similarity matrix, got shape {sim.shape}")
    B = sim.shape[0]
    if not 1 <= k <= B:
        raise ValueError(f"k={k} must be in [1, {B}]")
    ir = float(np.mean(_ranks(sim.T) < k))
    tr = float(np.mean(_ranks(sim) < k))
    return ir, tr
