"""Parameter storage and the layers used by the model.

Layers do not own parameters. Each layer knows the names it registered and
reads them from whichever :class:`ParameterStore` is passed at call time, so a
float64 copy of a store can be evaluated through the exact same graph.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor


def truncated_normal(rng, shape, std=0.02, bound=2.0):
    """Normal samples redrawn until they fall within ``bound`` standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


class ParameterStore:
    """Named parameter tensors in deterministic (insertion) order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        return self._params[name]

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def num_values(self):
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def grads(self):
        """Gradients by name; parameters the loss never reached get zeros."""
        return OrderedDict(
            (name, p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self._params.items()
        )

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self._params.items())

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)}")
        for name, p in self._params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(self.dtype, copy=True)

    def astype(self, dtype):
        other = ParameterStore(dtype)
        for name, p in self._params.items():
            other.add(name, p.data.astype(dtype))
        return other

    def copy(self):
        return self.astype(self.dtype)


class Linear:
    def __init__(self, store, name, d_in, d_out, rng, std=0.02):
        self.weight = f"{name}.weight"
        self.bias = f"{name}.bias"
        self.d_in, self.d_out = d_in, d_out
        store.add(self.weight, truncated_normal(rng, (d_in, d_out), std))
        store.add(self.bias, np.zeros(d_out))

    def __call__(self, p, x):
        return T.linear(x, p[self.weight], p[self.bias])


class MLP:
    """Three linear layers with GELU between them."""

    def __init__(self, store, name, d_in, d_hidden, d_out, rng):
        self.layers = [
            Linear(store, f"{name}.0", d_in, d_hidden, rng),
            Linear(store, f"{name}.1", d_hidden, d_hidden, rng),
            Linear(store, f"{name}.2", d_hidden, d_out, rng),
        ]

    def __call__(self, p, x):
        x = T.gelu(self.layers[0](p, x))
        x = T.gelu(self.layers[1](p, x))
        return self.layers[2](p, x)


class LayerNorm:
    def __init__(self, store, name, dim):
        self.gamma = f"{name}.gamma"
        self.beta = f"{name}.beta"
        store.add(self.gamma, np.ones(dim))
        store.add(self.beta, np.zeros(dim))

    def __call__(self, p, x):
        return T.layer_norm(x, p[self.gamma], p[self.beta])


def scaled_dot_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the second-to-last axis; no mask."""
    d = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = T.softmax(T.mul(scores, 1.0 / math.sqrt(d)), axis=-1)
    return T.matmul(weights, v)


class MultiHeadSelfAttention:
    def __init__(self, store, name, dim, n_heads, rng):
        if dim % n_heads:
            raise ConfigError(f"hidden size {dim} is not divisible by {n_heads} heads")
        self.dim, self.n_heads = dim, n_heads
        self.q = Linear(store, f"{name}.q", dim, dim, rng)
        self.k = Linear(store, f"{name}.k", dim, dim, rng)
        self.v = Linear(store, f"{name}.v", dim, dim, rng)
        self.out = Linear(store, f"{name}.out", dim, dim, rng)

    def _heads(self, x):
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.n_heads, self.dim // self.n_heads)), (0, 2, 1, 3))

    def __call__(self, p, x):
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"attention expects (batch, seq, {self.dim}), got {x.shape}")
        b, n, _ = x.shape
        heads = scaled_dot_attention(self._heads(self.q(p, x)), self._heads(self.k(p, x)), self._heads(self.v(p, x)))
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, n, self.dim))
        return self.out(p, merged)


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 10
    d_h: int = 1024
    n_heads: int = 8
    mlp_ratio: float = 4.0
    positional_encoding: str = "none"

    def __post_init__(self):
        if self.positional_encoding != "none":
            raise ConfigError("positional encodings are not supported; the encoder must stay order-agnostic")
        if self.n_layers < 1 or self.d_h < 1 or self.n_heads < 1:
            raise ConfigError("transformer sizes must be positive")
        if self.d_h % self.n_heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by n_heads={self.n_heads}")


class ResidualBlock:
    """Pre-norm block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, store, name, cfg: TransformerConfig, rng):
        hidden = int(round(cfg.d_h * cfg.mlp_ratio))
        self.ln1 = LayerNorm(store, f"{name}.ln1", cfg.d_h)
        self.attn = MultiHeadSelfAttention(store, f"{name}.attn", cfg.d_h, cfg.n_heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", cfg.d_h)
        self.ff_in = Linear(store, f"{name}.ff_in", cfg.d_h, hidden, rng)
        self.ff_out = Linear(store, f"{name}.ff_out", hidden, cfg.d_h, rng)

    def __call__(self, p, x):
        x = T.add(x, self.attn(p, self.ln1(p, x)))
        return T.add(x, self.ff_out(p, T.gelu(self.ff_in(p, self.ln2(p, x)))))


class TransformerEncoder:
    """Encoder-only stack over the sequence axis; no positional signal."""

    def __init__(self, store, name, cfg: TransformerConfig, rng):
        self.blocks = [ResidualBlock(store, f"{name}.{i}", cfg, rng) for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm(store, f"{name}.ln_f", cfg.d_h)

    def __call__(self, p, x):
        for block in self.blocks:
            x = block(p, x)
        return self.ln_f(p, x)
