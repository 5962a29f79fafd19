"""Small module system on top of :mod:`zvforge.tensor`."""
from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container. Tensor attributes are parameters; Module/list attributes are children.

    An attribute named ``lora`` holds an adapter whose parameters are exported
    under a ``lora.`` prefix, e.g. ``lora.decoder.layers.0.attn.q.A``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Tensor):
                yield name, value
            elif key == "lora" and isinstance(value, Module):
                for sub, p in value.named_parameters():
                    yield f"lora.{prefix}.{sub}", p
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def init_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return T.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float = None):
        self.weight = init_normal(rng, (d_out, d_in), 1.0 / math.sqrt(d_in) if std is None else std)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None
        self.lora = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def base(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def __call__(self, x: Tensor) -> Tensor:
        out = self.base(x)
        if self.lora is not None:
            out = out + self.lora.delta(x)
        return out

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}.weight" if prefix else "weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias" if prefix else "bias", self.bias
        if self.lora is not None:
            for sub, p in self.lora.named_parameters():
                yield f"lora.{prefix}.{sub}", p


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, self._eps)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head attention whose rows may be split into independently masked blocks.

    ``blocks`` lets callers keep two token streams (queries and text, or a
    prefix and its continuation) in separate tensors: each block of rows only
    touches the key streams its mask actually allows, so rows that cannot see
    a stream are computed from exactly the same arrays whether or not that
    stream is present.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: Optional[int] = None):
        if dim % heads:
            raise ValueError(f"hidden size {dim} is not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.q = Linear(dim, dim, rng)
        self.k = Linear(kv_dim, dim, rng)
        self.v = Linear(kv_dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self._heads = heads

    def _split(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        return x.reshape(B, N, self._heads, D // self._heads).transpose(0, 2, 1, 3)

    def _merge(self, x: Tensor) -> Tensor:
        B, H, N, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, N, H * dh)

    def attend(self, q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        """q [B,H,Nq,dh], k/v [B,H,Nk,dh], mask broadcastable to [B,Nq,Nk]."""
        scores = T.matmul(q, k.T) * (1.0 / math.sqrt(q.shape[-1]))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim == 2:
                mask = mask[None]
            mask = mask[:, None]
        probs = T.softmax_rows(scores, mask)
        return self._merge(T.matmul(probs, v))

    def cross(self, x: Tensor, context: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        return self.o(self.attend(q, k, v, mask))

    def blocks(self, streams: Sequence[Optional[Tensor]], mask: np.ndarray) -> List[Optional[Tensor]]:
        """Self-attention over concatenated ``streams`` with a full [B, N, N] boolean mask.

        Returns one output per stream (``None`` for absent/empty streams).
        """
        lengths = [0 if s is None else s.shape[1] for s in streams]
        bounds = np.cumsum([0] + lengths)
        projected = []
        for s in streams:
            if s is None or s.shape[1] == 0:
                projected.append(None)
            else:
                projected.append((self._split(self.q(s)), self._split(self.k(s)), self._split(self.v(s))))
        outs: List[Optional[Tensor]] = []
        for i, proj in enumerate(projected):
            if proj is None:
                outs.append(None)
                continue
            rows = mask[:, bounds[i]:bounds[i + 1], :]
            keys, vals, cols = [], [], []
            for j, other in enumerate(projected):
                if other is None:
                    continue
                block = rows[:, :, bounds[j]:bounds[j + 1]]
                if block.any():
                    keys.append(other[1])
                    vals.append(other[2])
                    cols.append(block)
            k = keys[0] if len(keys) == 1 else T.concat(keys, axis=2)
            v = vals[0] if len(vals) == 1 else T.concat(vals, axis=2)
            sub = cols[0] if len(cols) == 1 else np.concatenate(cols, axis=-1)
            sub_mask = None if sub.all() else sub
            outs.append(self.o(self.attend(proj[0], k, v, sub_mask)))
        return outs
