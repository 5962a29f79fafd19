"""Joint pre-training objectives: contrastive (ITC), grounded generation (ITG), matching (ITM)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .qformer import BOS, EOS, PAD, MaskMode, pad_batch
from .tensor import Tensor

IGNORE = -100
MATCH, MISMATCH = 0, 1


class BatchTooSmallError(ValueError):
    pass


class NoNegativeError(ValueError):
    pass


@dataclass
class ObjectivesConfig:
    itc_weight: float = 1.0
    itg_weight: float = 1.0
    itm_weight: float = 1.0
    temperature_init: float = 0.07
    temperature_min: float = 1e-3
    temperature_max: float = 1.0
    negatives_base: str = "random"
    negatives_chat: str = "hard"
    deterministic_negatives: bool = True
    symmetric_negatives: bool = False

    def __post_init__(self):
        from .qformer import ConfigError
        for name in ("negatives_base", "negatives_chat"):
            if getattr(self, name) not in ("hard", "random"):
                raise ConfigError(f"objectives.{name} must be 'hard' or 'random', got {getattr(self, name)!r}")
        if not 0 < self.temperature_min <= self.temperature_init <= self.temperature_max:
            raise ConfigError("objectives temperature must satisfy 0 < min <= init <= max")
        for name in ("itc_weight", "itg_weight", "itm_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"objectives.{name} must be >= 0")


@dataclass
class Batch:
    images: np.ndarray
    captions: List[List[int]]

    def __post_init__(self):
        self.images = np.stack([np.asarray(getattr(im, "data", im)) for im in self.images]) \
            if not isinstance(self.images, np.ndarray) else self.images
        if len(self.images) != len(self.captions):
            raise ValueError(f"batch has {len(self.images)} images but {len(self.captions)} captions")
        if len(self.captions) < 1:
            raise ValueError("batch is empty")
        for i, cap in enumerate(self.captions):
            if not cap or cap[-1] != EOS:
                raise ValueError(f"caption {i} must be non-empty and end with eos")

    @property
    def size(self) -> int:
        return len(self.captions)

    def text_inputs(self, rows: Optional[Sequence[int]] = None) -> np.ndarray:
        rows = range(self.size) if rows is None else rows
        return pad_batch([[BOS] + list(self.captions[j]) for j in rows])


@dataclass
class SimilarityMatrix:
    s: np.ndarray
    temperature: float

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class JointLoss:
    itc: Tensor
    itg: Tensor
    itm: Tensor
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    sim: Optional[SimilarityMatrix] = None
    negatives: Optional[List[int]] = None
    total: Tensor = field(init=False)

    def __post_init__(self):
        a, b, c = self.weights
        if (a, b, c) == (1.0, 1.0, 1.0):
            self.total = self.itc + self.itg + self.itm
        else:
            self.total = self.itc * a + self.itg * b + self.itm * c

    def as_floats(self) -> dict:
        return {"itc": self.itc.item(), "itg": self.itg.item(), "itm": self.itm.item(),
                "total": self.total.item()}


# -- ITC ---------------------------------------------------------------------

def itc_similarity(query_states, text_embedding) -> float:
    """Best-matching query score: max over q of <query_q, text> after L2 normalisation."""
    q = np.asarray(getattr(query_states, "data", query_states), dtype=np.float64)
    t = np.asarray(getattr(text_embedding, "data", text_embedding), dtype=np.float64)
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    tn = np.linalg.norm(t)
    if np.any(qn == 0) or tn == 0:
        raise T.NormalizationError("itc_similarity: zero-norm vector")
    return float(np.max((q / qn) @ (t / tn)))


def similarity_matrix(image_feats: Tensor, text_feats: Tensor) -> Tensor:
    """image_feats [B, Q, h], text_feats [B, h] -> s [B, B] with s[i, j] = max_q cos(img_i_q, txt_j)."""
    B, Q, h = image_feats.shape
    img = T.l2_normalize(image_feats, axis=-1)
    txt = T.l2_normalize(text_feats, axis=-1)
    per_query = T.matmul(T.reshape(img, (B * Q, h)), txt.T)
    return T.max_(T.reshape(per_query, (B, Q, text_feats.shape[0])), axis=1)


def itc_features(model, batch: Batch) -> Tuple[Tensor, Tensor]:
    images = model.encode_images(batch.images)
    out = model.qformer.encode(model.queries, images, batch.text_inputs(), MaskMode.ITC)
    img = model.qformer.vision_proj(out.query_states)
    txt = model.qformer.text_proj(out.text_states[:, 0, :])
    return img, txt


def itc_loss(sim, temperature=None, bounds: Tuple[float, float] = (1e-3, 1.0)) -> Tensor:
    """Symmetric InfoNCE over ``sim / temperature`` with the diagonal as positives."""
    if isinstance(sim, SimilarityMatrix):
        temperature = sim.temperature if temperature is None else temperature
        sim = Tensor(sim.s)
    sim = T.as_tensor(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"itc_loss needs a square similarity matrix, got {sim.shape}")
    if temperature is None:
        raise ValueError("itc_loss needs a temperature")
    B = sim.shape[0]
    if isinstance(temperature, Tensor):
        logits = T.div(sim, T.clamp(temperature, *bounds))
    else:
        logits = sim * (1.0 / float(temperature))
    targets = np.arange(B)
    return (T.cross_entropy(logits, targets) + T.cross_entropy(logits.T, targets)) * 0.5


# -- hard negatives ------------------------------------------------------------

def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def negative_weights(sim: SimilarityMatrix, row: int) -> np.ndarray:
    """Sampling weights softmax(s[row, j] / tau) over j != row (zero at j == row)."""
    logits = sim.s[row] / sim.temperature
    logits = np.where(np.arange(len(logits)) == row, -np.inf, logits)
    w = np.exp(logits - logits.max())
    return w / w.sum()


def sample_hard_negative(sim: SimilarityMatrix, row: int, deterministic: bool = True, seed=None) -> int:
    B = sim.s.shape[0]
    if B < 2:
        raise NoNegativeError("a batch of one has no in-batch negative")
    if not 0 <= row < B:
        raise IndexError(f"row {row} outside batch of {B}")
    if deterministic:
        scores = sim.s[row].copy()
        scores[row] = -np.inf
        return int(np.argmax(scores))
    return int(_rng(seed).choice(B, p=negative_weights(sim, row)))


def random_negatives(B: int, rng) -> List[int]:
    if B < 2:
        raise NoNegativeError("a batch of one has no in-batch negative")
    rng = _rng(rng)
    return [int((i + rng.integers(1, B)) % B) for i in range(B)]


def mine_negatives(sim: SimilarityMatrix, strategy: str = "hard", deterministic: bool = True,
                   rng=None) -> List[int]:
    """One text negative per image row."""
    B = sim.s.shape[0]
    if strategy == "random":
        return random_negatives(B, rng)
    if strategy != "hard":
        raise ValueError(f"unknown negative strategy {strategy!r}")
    rng = None if deterministic else _rng(rng)
    return [sample_hard_negative(sim, i, deterministic, rng) for i in range(B)]


# -- ITM -----------------------------------------------------------------------

def itm_loss_from_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    return T.cross_entropy(logits, np.asarray(labels, dtype=np.int64))


def itm_logits(model, images: np.ndarray, tokens: np.ndarray) -> Tensor:
    feats = model.encode_images(images)
    out = model.qformer.encode(model.queries, feats, tokens, MaskMode.ITM)
    return model.itm_head(T.mean(out.query_states, axis=1))


def itm_loss(model, batch: Batch, negatives: Sequence[int],
             image_negatives: Optional[Sequence[int]] = None) -> Tensor:
    """Two-class matching loss; one positive and one negative text per image.

    With ``image_negatives`` each text j is also paired with image image_negatives[j].
    """
    B = batch.size
    negatives = list(negatives)
    if len(negatives) != B or any(n == i for i, n in enumerate(negatives)):
        raise ValueError("negatives must give one index per row, never the row itself")
    img_rows = list(range(B)) + list(range(B))
    txt_rows = list(range(B)) + negatives
    labels = [MATCH] * B + [MISMATCH] * B
    if image_negatives is not None:
        image_negatives = list(image_negatives)
        if any(n == j for j, n in enumerate(image_negatives)):
            raise ValueError("image negatives must never equal the text index")
        img_rows += image_negatives
        txt_rows += list(range(B))
        labels += [MISMATCH] * B
    logits = itm_logits(model, batch.images[img_rows], batch.text_inputs(txt_rows))
    return itm_loss_from_logits(logits, labels)


# -- ITG -----------------------------------------------------------------------

def itg_targets(batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    inputs = pad_batch([[BOS] + list(c[:-1]) for c in batch.captions])
    targets = pad_batch([list(c) for c in batch.captions], pad=IGNORE)
    targets[targets == PAD] = IGNORE
    return inputs, targets


def itg_loss(model, batch: Batch) -> Tensor:
    """Next-token loss on captions, text conditioned on queries and preceding text."""
    inputs, targets = itg_targets(batch)
    feats = model.encode_images(batch.images)
    out = model.qformer.encode(model.queries, feats, inputs, MaskMode.ITG)
    return T.cross_entropy(out.lm_logits, targets, ignore_index=IGNORE)


# -- joint -----------------------------------------------------------------------

def joint_loss(model, batch: Batch, deterministic_negatives: bool = True, strategy: str = "hard",
               rng=None, weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
               symmetric: bool = False, bounds: Tuple[float, float] = (1e-3, 1.0)) -> JointLoss:
    """ITC, then negatives mined from its similarity, then ITM and ITG, all on one parameter set."""
    if batch.size < 2:
        raise BatchTooSmallError(f"joint loss needs a batch of at least 2, got {batch.size}")
    img, txt = itc_features(model, batch)
    sim_t = similarity_matrix(img, txt)
    itc = itc_loss(sim_t, model.temperature, bounds)
    tau = float(np.clip(model.temperature.data.reshape(-1)[0], *bounds))
    sim = SimilarityMatrix(sim_t.data.copy(), tau)
    negatives = mine_negatives(sim, strategy, deterministic_negatives, rng)
    image_negs = None
    if symmetric:
        column_view = SimilarityMatrix(sim.s.T.copy(), tau)
        image_negs = mine_negatives(column_view, strategy, deterministic_negatives, rng)
    itm = itm_loss(model, batch, negatives, image_negs)
    itg = itg_loss(model, batch)
    return JointLoss(itc=itc, itg=itg, itm=itm, weights=tuple(float(w) for w in weights),
                     sim=sim, negatives=negatives)
