"""Transformer building blocks on top of the autodiff tensor."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Parameter, Tensor

NEG_INF = -1e9


class Module:
    """Minimal module container: parameters are discovered by attribute walk."""

    training: bool = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)

    def astype(self, dtype):
        """Cast every parameter (and moments) in place, e.g. to float64 for gradient checks."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.m = p.m.astype(dtype)
            p.v = p.v.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None, dtype=DEFAULT_DTYPE):
        std = std if std is not None else 1.0 / math.sqrt(d_in)
        self.weight = Parameter(_normal(rng, (d_in, d_out), std, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.gamma = Parameter(np.ones(d, dtype=dtype))
        self.beta = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02, dtype=DEFAULT_DTYPE):
        self.weight = Parameter(_normal(rng, (n, d), std, dtype))

    def __call__(self, ids) -> Tensor:
        return F.embedding(self.weight, ids)


class MultiHeadAttention(Module):
    """Multi-head attention with separate query and key/value inputs.

    Used both as self-attention (``kv is x``) and cross-attention.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dropout: float = 0.0, dtype=DEFAULT_DTYPE):
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.d, self.heads, self.dropout = d, heads, dropout
        self.q = Linear(d, d, rng, dtype=dtype)
        self.k = Linear(d, d, rng, dtype=dtype)
        self.v = Linear(d, d, rng, dtype=dtype)
        self.o = Linear(d, d, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return F.transpose(F.reshape(x, (b, t, self.heads, self.d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, kv: Tensor, mask: np.ndarray | None = None, rng=None) -> Tensor:
        if x.ndim != 3 or kv.ndim != 3 or x.shape[0] != kv.shape[0] or x.shape[2] != self.d or kv.shape[2] != self.d:
            raise F.shape_error("multi_head_attention", x.shape, kv.shape)
        q = self._split(self.q(x))
        k = self._split(self.k(kv))
        v = self._split(self.v(kv))
        out = F.attention(q, k, v, mask)
        b, _, t, _ = out.shape
        out = F.reshape(F.transpose(out, (0, 2, 1, 3)), (b, t, self.d))
        out = self.o(out)
        return F.dropout(out, self.dropout, rng, self.training)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0, dtype=DEFAULT_DTYPE):
        self.fc1 = Linear(d, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, d, rng, dtype=dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = F.gelu(self.fc1(x))
        h = F.dropout(h, self.dropout, rng, self.training)
        return F.dropout(self.fc2(h), self.dropout, rng, self.training)


class EncoderLayer(Module):
    """Pre-norm transformer encoder layer."""

    def __init__(self, d: int, heads: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0, dtype=DEFAULT_DTYPE):
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dropout, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype=dtype)
        self.ff = FeedForward(d, hidden, rng, dropout, dtype=dtype)

    def __call__(self, x: Tensor, mask=None, rng=None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask, rng)
        return x + self.ff(self.ln2(x), rng)


class DecoderLayer(Module):
    """Pre-norm decoder layer: causal self-attention, cross-attention, feed-forward."""

    def __init__(self, d: int, heads: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0, dtype=DEFAULT_DTYPE):
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.self_attn = MultiHeadAttention(d, heads, rng, dropout, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, heads, rng, dropout, dtype=dtype)
        self.ln3 = LayerNorm(d, dtype=dtype)
        self.ff = FeedForward(d, hidden, rng, dropout, dtype=dtype)

    def __call__(self, x: Tensor, memory: Tensor, self_mask=None, memory_mask=None, rng=None) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_mask, rng)
        x = x + self.cross_attn(self.ln2(x), memory, memory_mask, rng)
        return x + self.ff(self.ln3(x), rng)


class TransformerEncoder(Module):
    def __init__(self, d: int, layers: int, heads: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0, dtype=DEFAULT_DTYPE):
        self.layers = [EncoderLayer(d, heads, hidden, rng, dropout, dtype=dtype) for _ in range(layers)]
        self.norm = LayerNorm(d, dtype=dtype)

    def __call__(self, x: Tensor, mask=None, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask, rng)
        return self.norm(x)


def causal_mask(t: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Additive (t, t) mask blocking attention to future positions."""
    return np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)


def padding_mask(valid: np.ndarray, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Additive (B, 1, 1, Tk) mask from a boolean (B, Tk) validity array."""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]
