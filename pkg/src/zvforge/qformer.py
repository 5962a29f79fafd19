"""Querying Transformer and the toy causal decoder it feeds.

Queries and text are kept as two streams that share self-attention weights;
the per-mode visibility between them comes from :func:`build_attention_mask`.
Cross-attention to the (frozen) image features is applied to the query
stream only, on every ``cross_attention_period``-th layer.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, init_normal
from .tensor import Tensor

PAD, BOS, EOS, SEP = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class MaskMode(enum.Enum):
    ITC = "itc"
    ITG = "itg"
    ITM = "itm"
    INSTRUCTION = "instruction"


@dataclass
class QFormerConfig:
    num_queries: int = 4
    hidden_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    cross_attention_period: int = 2
    vocab_size: int = 64
    max_text_len: int = 32
    image_patches: int = 8
    image_feat_dim: int = 16
    decoder_dim: int = 32
    decoder_layers: int = 2
    decoder_heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "dropout":
                if not 0.0 <= value < 1.0:
                    raise ConfigError(f"qformer.dropout must be in [0, 1), got {value}")
            elif not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"qformer.{f.name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"qformer.hidden_dim={self.hidden_dim} is not divisible by num_heads={self.num_heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(
                f"qformer.decoder_dim={self.decoder_dim} is not divisible by decoder_heads={self.decoder_heads}")
        if not 1 <= self.cross_attention_period <= self.num_layers:
            raise ConfigError(
                f"qformer.cross_attention_period must be in [1, {self.num_layers}], "
                f"got {self.cross_attention_period}")
        if self.vocab_size <= SEP:
            raise ConfigError("qformer.vocab_size must leave room beyond the 4 reserved ids")

    @classmethod
    def full_scale(cls, **overrides) -> "QFormerConfig":
        """64 queries over a 256x768 feature grid; depth is kept shallow for desk use."""
        base = dict(num_queries=64, hidden_dim=768, num_layers=2, num_heads=12,
                    image_patches=256, image_feat_dim=768, decoder_dim=256, decoder_heads=8,
                    decoder_layers=1, vocab_size=64)
        base.update(overrides)
        return cls(**base)

    def cross_layers(self) -> List[int]:
        return [i for i in range(self.num_layers) if i % self.cross_attention_period == 0]


def build_attention_mask(mode: MaskMode, num_queries: int, text_len: int) -> np.ndarray:
    """Boolean [(Q+T) x (Q+T)] visibility; entry (i, j) is True iff i may attend to j."""
    if num_queries < 1:
        raise ValueError(f"num_queries must be >= 1, got {num_queries}")
    if text_len < 0:
        raise ValueError(f"text_len must be >= 0, got {text_len}")
    mode = MaskMode(mode)
    Q, N = num_queries, num_queries + text_len
    if mode is MaskMode.ITG and text_len == 0:
        raise ValueError("ITG mask needs at least one text position")
    if mode in (MaskMode.ITM, MaskMode.INSTRUCTION):
        return np.ones((N, N), dtype=bool)
    mask = np.zeros((N, N), dtype=bool)
    mask[:Q, :Q] = True
    if mode is MaskMode.ITC:
        mask[Q:, Q:] = True
    else:
        mask[Q:, :Q] = True
        mask[Q:, Q:] = np.tril(np.ones((text_len, text_len), dtype=bool))
    return mask


@dataclass
class QFormerOutput:
    query_states: Tensor
    text_states: Optional[Tensor] = None
    lm_logits: Optional[Tensor] = None


class QueryEmbeddings(Module):
    def __init__(self, config: QFormerConfig, rng: np.random.Generator):
        self.table = init_normal(rng, (config.num_queries, config.hidden_dim), 1.0)


class QFormerLayer(Module):
    def __init__(self, config: QFormerConfig, rng: np.random.Generator, cross: bool):
        h = config.hidden_dim
        self.ln_self = LayerNorm(h)
        self.self_attn = MultiHeadAttention(h, config.num_heads, rng)
        if cross:
            self.ln_cross = LayerNorm(h)
            self.cross_attn = MultiHeadAttention(h, config.num_heads, rng, kv_dim=config.image_feat_dim)
        self.ln_query_ffn = LayerNorm(h)
        self.query_ffn = FeedForward(h, h * config.ffn_mult, rng)
        self.ln_text_ffn = LayerNorm(h)
        self.text_ffn = FeedForward(h, h * config.ffn_mult, rng)
        self._cross = cross

    def __call__(self, xq: Tensor, xt: Optional[Tensor], image: Tensor, mask: np.ndarray):
        aq, at = self.self_attn.blocks(
            [self.ln_self(xq), None if xt is None else self.ln_self(xt)], mask)
        xq = xq + aq
        if xt is not None:
            xt = xt + at
        if self._cross:
            xq = xq + self.cross_attn.cross(self.ln_cross(xq), image)
        xq = xq + self.query_ffn(self.ln_query_ffn(xq))
        if xt is not None:
            xt = xt + self.text_ffn(self.ln_text_ffn(xt))
        return xq, xt


def _check_tokens(tokens: np.ndarray, vocab_size: int) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= vocab_size)].reshape(-1)[0]
        raise VocabularyError(f"unknown token id {int(bad)} (vocabulary size {vocab_size})")


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD, length: Optional[int] = None) -> np.ndarray:
    n = max((len(s) for s in seqs), default=0) if length is None else length
    out = np.full((len(seqs), n), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


class QFormer(Module):
    def __init__(self, config: QFormerConfig, rng: np.random.Generator):
        self._config = config
        h = config.hidden_dim
        cross = set(config.cross_layers())
        self.token_embedding = init_normal(rng, (config.vocab_size, h), 1.0)
        self.position_embedding = init_normal(rng, (config.max_text_len, h), 0.1)
        self.ln_embed = LayerNorm(h)
        self.layers = [QFormerLayer(config, rng, i in cross) for i in range(config.num_layers)]
        self.ln_out = LayerNorm(h)
        # small output init keeps initial logits near uniform
        self.lm_head = Linear(h, config.vocab_size, rng, std=0.02)
        self.vision_proj = Linear(h, h, rng)
        self.text_proj = Linear(h, h, rng)

    @property
    def cfg(self) -> QFormerConfig:
        return self._config

    def _check_image(self, images: Tensor) -> None:
        c = self._config
        if images.shape[-2:] != (c.image_patches, c.image_feat_dim):
            raise ShapeError(
                f"image features have shape {images.shape[-2:]}, config expects "
                f"({c.image_patches}, {c.image_feat_dim})")

    def embed_text(self, tokens: np.ndarray) -> Tensor:
        T_ = tokens.shape[1]
        x = T.embedding(self.token_embedding, tokens) + self.position_embedding[:T_]
        return self.ln_embed(x)

    def encode(self, queries: QueryEmbeddings, images: Tensor, tokens: Optional[np.ndarray],
               mode: MaskMode) -> QFormerOutput:
        """Batched forward: images [B, P, F]; tokens int [B, T] (PAD-padded) or None."""
        mode = MaskMode(mode)
        c = self._config
        images = T.as_tensor(images)
        if images.ndim != 3:
            raise ShapeError(f"batched image features must be [B, P, F], got {images.shape}")
        self._check_image(images)
        B = images.shape[0]
        Q = c.num_queries
        if tokens is not None:
            tokens = np.asarray(tokens, dtype=np.int64)
            if tokens.ndim != 2 or tokens.shape[0] != B:
                raise ShapeError(f"tokens must be [B={B}, T], got {tokens.shape}")
            if tokens.shape[1] == 0:
                tokens = None
        if tokens is not None:
            if tokens.shape[1] > c.max_text_len:
                raise ShapeError(f"text length {tokens.shape[1]} exceeds max_text_len={c.max_text_len}")
            _check_tokens(tokens, c.vocab_size)
        T_ = 0 if tokens is None else tokens.shape[1]

        layout = build_attention_mask(mode, Q, T_)
        mask = np.broadcast_to(layout, (B,) + layout.shape).copy()
        if T_:
            valid = np.concatenate([np.ones((B, Q), dtype=bool), tokens != PAD], axis=1)
            mask &= valid[:, None, :]
            idx = np.arange(Q, Q + T_)
            mask[:, idx, idx] = True

        xq = T.add(Tensor(np.zeros((B, Q, c.hidden_dim), dtype=queries.table.data.dtype)), queries.table)
        xt = self.embed_text(tokens) if T_ else None
        if c.dropout:
            xq = T.dropout(xq, c.dropout)
        for layer in self.layers:
            xq, xt = layer(xq, xt, images, mask)
        xq = self.ln_out(xq)
        out = QFormerOutput(query_states=xq)
        if xt is not None:
            out.text_states = self.ln_out(xt)
            if mode is MaskMode.ITG:
                out.lm_logits = self.lm_head(out.text_states)
        return out

    def forward(self, queries: QueryEmbeddings, image, text_tokens: Optional[Sequence[int]] = None,
                mode: MaskMode = MaskMode.ITC) -> QFormerOutput:
        """Single-example forward: image [P, F] -> query_states [Q, h]."""
        image = T.as_tensor(image)
        if image.ndim != 2:
            raise ShapeError(f"image features must be [P, F], got {image.shape}")
        self._check_image(image)
        tokens = None
        if text_tokens is not None and len(text_tokens):
            tokens = np.asarray([list(text_tokens)], dtype=np.int64)
        out = self.encode(queries, T.reshape(image, (1,) + image.shape), tokens, mode)
        return QFormerOutput(
            query_states=_squeeze0(out.query_states),
            text_states=None if out.text_states is None else _squeeze0(out.text_states),
            lm_logits=None if out.lm_logits is None else _squeeze0(out.lm_logits),
        )

    def forward_instructed(self, queries: QueryEmbeddings, image,
                           instruction_tokens: Sequence[int]) -> QFormerOutput:
        """Instruction-aware extraction: queries and instruction attend to each other."""
        if instruction_tokens is None or len(instruction_tokens) == 0:
            raise ValueError("instruction is empty; use forward() for instruction-free extraction")
        return self.forward(queries, image, instruction_tokens, MaskMode.INSTRUCTION)

    def encode_instructed(self, queries: QueryEmbeddings, images: Tensor, instructions: np.ndarray) -> QFormerOutput:
        instructions = np.asarray(instructions, dtype=np.int64)
        if instructions.ndim != 2 or instructions.shape[1] == 0:
            raise ValueError("instruction batch is empty; use encode() for instruction-free extraction")
        return self.encode(queries, images, instructions, MaskMode.INSTRUCTION)


def _squeeze0(x: Tensor) -> Tensor:
    return T.reshape(x, x.shape[1:])


def project_queries(fc: Linear, query_states: Tensor) -> Tensor:
    """Affine map of query states into the decoder width."""
    if query_states.shape[-1] != fc.d_in:
        raise ShapeError(f"query states have width {query_states.shape[-1]}, projection expects {fc.d_in}")
    return fc(query_states)


class DecoderLayer(Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * ffn_mult, rng)

    def __call__(self, streams, mask):
        normed = [None if s is None else self.ln1(s) for s in streams]
        outs = self.attn.blocks(normed, mask)
        streams = [s if o is None else s + o for s, o in zip(streams, outs)]
        return [None if s is None else s + self.ffn(self.ln2(s)) for s in streams]


class ToyCausalDecoder(Module):
    """Stand-in language model: a projected-query prefix followed by causally masked tokens."""

    def __init__(self, config: QFormerConfig, rng: np.random.Generator):
        D = config.decoder_dim
        self._num_prefix = config.num_queries
        self._vocab = config.vocab_size
        self._max_tokens = config.max_text_len
        self.token_embedding = init_normal(rng, (config.vocab_size, D), 1.0)
        self.position_embedding = init_normal(rng, (config.num_queries + config.max_text_len, D), 0.1)
        self.layers = [DecoderLayer(D, config.decoder_heads, config.ffn_mult, rng)
                       for _ in range(config.decoder_layers)]
        self.ln_out = LayerNorm(D)
        self.lm_head = Linear(D, config.vocab_size, rng, std=0.02)

    @property
    def vocab_size(self) -> int:
        return self._vocab

    def attention_mask(self, num_tokens: int) -> np.ndarray:
        P = self._num_prefix
        N = P + num_tokens
        mask = np.zeros((N, N), dtype=bool)
        mask[:P, :P] = True
        mask[P:, :P] = True
        mask[P:, P:] = np.tril(np.ones((num_tokens, num_tokens), dtype=bool))
        return mask

    def __call__(self, prefix: Tensor, tokens: np.ndarray) -> Tensor:
        """prefix [B, P, D]; tokens int [B, T] -> logits [B, T, V]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        B, P, D = prefix.shape
        if P != self._num_prefix:
            raise ShapeError(f"prefix has {P} rows, decoder expects {self._num_prefix}")
        if tokens.ndim != 2 or tokens.shape[0] != B:
            raise ShapeError(f"tokens must be [B={B}, T], got {tokens.shape}")
        n = tokens.shape[1]
        if n == 0:
            return Tensor(np.zeros((B, 0, self._vocab), dtype=prefix.data.dtype))
        if n > self._max_tokens:
            raise ShapeError(f"{n} tokens exceed the decoder limit of {self._max_tokens}")
        _check_tokens(tokens, self._vocab)
        xp = prefix + self.position_embedding[:P]
        xt = T.embedding(self.token_embedding, tokens) + self.position_embedding[P:P + n]
        mask = self.attention_mask(n)[None]
        streams = [xp, xt]
        for layer in self.layers:
            streams = layer(streams, mask)
        return self.lm_head(self.ln_out(streams[1]))


def decode(decoder: ToyCausalDecoder, prefix: Tensor, tokens: Sequence[int]) -> Tensor:
    """Single-example decoding: prefix [P, D], tokens list -> logits [len(tokens), V]."""
    prefix = T.as_tensor(prefix)
    if prefix.ndim != 2:
        raise ShapeError(f"prefix must be [P, D], got {prefix.shape}")
    ids = np.asarray([list(tokens)], dtype=np.int64).reshape(1, -1)
    logits = decoder(T.reshape(prefix, (1,) + prefix.shape), ids)
    return _squeeze0(logits)
