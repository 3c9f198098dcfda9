"""Multi-head attention, post-norm encoder/decoder layers, sinusoidal encodings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, Module
from .tensor import ContractError, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ContractError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")
        if self.ffn_dim < self.model_dim:
            raise ContractError("ffn_dim must be >= model_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass(frozen=True)
class PositionalEncoding:
    kind: str  # "spatial-2D" | "temporal-1D"
    table: np.ndarray
    fixed: bool = True


def _sincos(positions: np.ndarray, dim: int) -> np.ndarray:
    i = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    ang = positions[:, None] * freq[None, :]
    out = np.empty((len(positions), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def sinusoidal_1d(length: int, dim: int) -> PositionalEncoding:
    if dim <= 0 or dim % 2:
        raise ContractError(f"1-D sinusoid needs an even positive dim, got {dim}")
    return PositionalEncoding("temporal-1D", _sincos(np.arange(length, dtype=float), dim))


def sinusoidal_2d(height: int, width: int, dim: int) -> PositionalEncoding:
    """Row encoding in the first dim/2 channels, column encoding in the rest."""
    if dim <= 0 or dim % 4:
        raise ContractError(f"2-D sinusoid needs dim divisible by 4, got {dim}")
    half = dim // 2
    rows = _sincos(np.arange(height, dtype=float), half)
    cols = _sincos(np.arange(width, dtype=float), half)
    table = np.concatenate([
        np.repeat(rows, width, axis=0),
        np.tile(cols, (height, 1)),
    ], axis=1)
    return PositionalEncoding("spatial-2D", table)


def _as_pos(pos) -> Tensor | None:
    if pos is None:
        return None
    if isinstance(pos, PositionalEncoding):
        return Tensor(pos.table)
    return T.as_tensor(pos)


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        C = cfg.model_dim
        self.q_proj = Linear(C, C, rng)
        self.k_proj = Linear(C, C, rng, bias=False)  # a key bias shifts every logit of a query equally
        self.v_proj = Linear(C, C, rng)
        self.out_proj = Linear(C, C, rng)
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.keep_weights = False
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        x = x.reshape(*lead, n, self.num_heads, self.head_dim)
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return x.transpose(axes)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """``q[..., N_q, C]``, ``k/v[..., N_k, C]`` -> ``[..., N_q, C]``."""
        if k.shape[-2] == 0:
            raise ContractError("attention over zero keys")
        if k.shape[-2] != v.shape[-2]:
            raise ContractError(f"key/value token counts differ: {k.shape} vs {v.shape}")
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = T.matmul(qh, T.swap_last(kh)) * (1.0 / np.sqrt(self.head_dim))
        weights = T.softmax_lastdim(scores)
        if self.keep_weights:
            self.last_weights = weights.data.copy()
        ctx = T.matmul(weights, vh)
        nd = ctx.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        ctx = ctx.transpose(axes)
        ctx = ctx.reshape(*ctx.shape[:-2], self.num_heads * self.head_dim)
        return self.out_proj(ctx)


class FeedForward(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dropout_rng=None):
        self.lin1 = Linear(cfg.model_dim, cfg.ffn_dim, rng)
        self.lin2 = Linear(cfg.ffn_dim, cfg.model_dim, rng)
        self.p = cfg.dropout
        self.rng = dropout_rng

    def __call__(self, x: Tensor) -> Tensor:
        h = T.dropout(T.relu(self.lin1(x)), self.p, self.rng, self.training)
        return self.lin2(h)


class EncoderLayer(Module):
    """pos-add -> self-attention -> add & norm -> FFN -> add & norm."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator,
                 dropout_rng: np.random.Generator | None = None):
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm1 = LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(cfg, rng, dropout_rng)
        self.norm2 = LayerNorm(cfg.model_dim)
        self.p = cfg.dropout
        self.rng = dropout_rng

    def __call__(self, x: Tensor, pos=None) -> Tensor:
        pos = _as_pos(pos)
        if pos is not None and pos.shape[-2] != x.shape[-2]:
            raise ContractError(f"positional table covers {pos.shape[-2]} tokens, input has {x.shape[-2]}")
        qk = x if pos is None else x + pos
        a = self.attn(qk, qk, x)
        x = self.norm1(x + T.dropout(a, self.p, self.rng, self.training))
        f = self.ffn(x)
        return self.norm2(x + T.dropout(f, self.p, self.rng, self.training))


class DecoderLayer(Module):
    """Query self-attention, cross-attention into encoder tokens, FFN; post-norm."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator,
                 dropout_rng: np.random.Generator | None = None):
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.norm1 = LayerNorm(cfg.model_dim)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(cfg, rng, dropout_rng)
        self.norm3 = LayerNorm(cfg.model_dim)
        self.p = cfg.dropout
        self.rng = dropout_rng

    def __call__(self, queries: Tensor, memory: Tensor, memory_pos=None, query_pos=None) -> Tensor:
        if memory.shape[-2] == 0:
            raise ContractError("decoder cross-attention over empty memory")
        memory_pos = _as_pos(memory_pos)
        query_pos = _as_pos(query_pos)
        qq = queries if query_pos is None else queries + query_pos
        a = self.self_attn(qq, qq, queries)
        x = self.norm1(queries + T.dropout(a, self.p, self.rng, self.training))
        qx = x if query_pos is None else x + query_pos
        km = memory if memory_pos is None else memory + memory_pos
        c = self.cross_attn(qx, km, memory)
        x = self.norm2(x + T.dropout(c, self.p, self.rng, self.training))
        f = self.ffn(x)
        return self.norm3(x + T.dropout(f, self.p, self.rng, self.training))

