"""Multi-head attention building blocks shared by the generator and selector.

Heads are parameterized per head (query/key/value projections of width
d_model/heads each) and concatenated through an output projection. Each
attention or feed-forward application is followed by a residual connection
and layer normalization, post-norm style.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Module, Tensor

NEG_INF = -1e9


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    """Additive mask hiding positions j > i."""
    return np.triu(np.full((n, n), NEG_INF, dtype=dtype), k=1)


def key_padding_mask(key_ids: list[int], pad_id: int, n_queries: int,
                     dtype=np.float64) -> np.ndarray | None:
    """Additive (n_queries, n_keys) mask hiding padded key positions."""
    cols = np.asarray([NEG_INF if i == pad_id else 0.0 for i in key_ids], dtype=dtype)
    if not cols.any():
        return None
    return np.broadcast_to(cols, (n_queries, len(key_ids))).copy()


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator,
                 dtype=np.float64):
        if d_model % heads != 0:
            raise ShapeError(f"width {d_model} not divisible by {heads} heads")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.scale = 1.0 / math.sqrt(self.d_head)
        self.w_q = [Tensor(T.xavier_uniform(rng, d_model, self.d_head, dtype),
                           requires_grad=True) for _ in range(heads)]
        self.w_k = [Tensor(T.xavier_uniform(rng, d_model, self.d_head, dtype),
                           requires_grad=True) for _ in range(heads)]
        self.w_v = [Tensor(T.xavier_uniform(rng, d_model, self.d_head, dtype),
                           requires_grad=True) for _ in range(heads)]
        self.w_out = Tensor(T.xavier_uniform(rng, d_model, d_model, dtype),
                            requires_grad=True)

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        if keys.shape[0] != values.shape[0]:
            raise ShapeError(f"keys {keys.shape} and values {values.shape} disagree")
        outs = []
        for h in range(self.heads):
            q = T.matmul(queries, self.w_q[h])
            k = T.matmul(keys, self.w_k[h])
            v = T.matmul(values, self.w_v[h])
            scores = T.scale(T.matmul(q, T.transpose(k)), self.scale)
            if mask is not None:
                scores = T.add(scores, Tensor(mask))
            outs.append(T.matmul(T.softmax(scores, axis=-1), v))
        return T.matmul(T.concat_cols(outs), self.w_out)


class AttentionBlock(Module):
    """Attention plus residual on the query side, then layer norm."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ln_gain = Tensor(np.ones(d_model, dtype=dtype), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        attended = self.attn(queries, keys, values, mask)
        return T.layer_norm(T.add(queries, attended), self.ln_gain, self.ln_bias)


class FeedForwardBlock(Module):
    """Position-wise feed-forward plus residual, then layer norm."""

    def __init__(self, d_model: int, d_ffn: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.w1 = Tensor(T.xavier_uniform(rng, d_model, d_ffn, dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(d_ffn, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(T.xavier_uniform(rng, d_ffn, d_model, dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)
        self.ln_gain = Tensor(np.ones(d_model, dtype=dtype), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        hidden = T.relu(T.add(T.matmul(x, self.w1), self.b1))
        out = T.add(T.matmul(hidden, self.w2), self.b2)
        return T.layer_norm(T.add(x, out), self.ln_gain, self.ln_bias)


class FusionStage(Module):
    """One attention application restored to its full sublayer form:
    attention, residual, layer norm, feed-forward, residual, layer norm."""

    def __init__(self, d_model: int, heads: int, d_ffn: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.attend = AttentionBlock(d_model, heads, rng, dtype)
        self.ffn = FeedForwardBlock(d_model, d_ffn, rng, dtype)

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        return self.ffn(self.attend(queries, keys, values, mask))


def sinusoidal_positions(max_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Fixed sine/cosine position table, one row per position."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)[:, : d_model // 2]
    return table.astype(dtype)
