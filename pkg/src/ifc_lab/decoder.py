"""Object-query decoder, output heads, spatial decoder and one-shot mask assembly."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput
from .layers import Conv2d, Linear, Module, param
from .tensor import ContractError, Tensor
from .transformer import AttentionConfig, DecoderLayer, sinusoidal_1d, sinusoidal_2d


class ClassificationHead(Module):
    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, num_classes + 1, rng)

    def logits(self, emb: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(emb)))

    def __call__(self, emb: Tensor) -> Tensor:
        return T.softmax_lastdim(self.logits(emb))


class SegmentationHead(Module):
    """Embedding -> 1x1 kernel (C_dec values) + bias, linear output."""

    def __init__(self, dim: int, dec_channels: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dec_channels + 1, rng)

    def __call__(self, emb: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(emb)))


class SpatialDecoder(Module):
    """Instance-agnostic, per-frame FPN-style upsampler from stride s to stride s/4."""

    def __init__(self, dim: int, dec_channels: int, skip_channels: tuple[int, int], rng: np.random.Generator):
        c2, c4 = skip_channels
        self.reduce = Conv2d(dim, dec_channels, 1, rng)
        self.lateral4 = Conv2d(c4, dec_channels, 1, rng)
        self.smooth4 = Conv2d(dec_channels, dec_channels, 3, rng)
        self.lateral2 = Conv2d(c2, dec_channels, 1, rng)
        self.smooth2 = Conv2d(dec_channels, dec_channels, 3, rng)

    def __call__(self, tokens: Tensor, H: int, W: int, skips: list[Tensor]) -> Tensor:
        n, HW, C = tokens.shape
        s2, s4 = skips
        if s4.shape[-2:] != (2 * H, 2 * W) or s2.shape[-2:] != (4 * H, 4 * W):
            raise ContractError(f"skip features {s2.shape}, {s4.shape} do not align with a {H}x{W} grid")
        x = self.reduce(tokens.transpose(0, 2, 1).reshape(n, C, H, W))
        x = T.relu(self.smooth4(T.upsample_nearest2x(x) + self.lateral4(s4)))
        x = T.relu(self.smooth2(T.upsample_nearest2x(x) + self.lateral2(s2)))
        return x


def assemble_masks(features: Tensor, cond_weights: Tensor) -> Tensor:
    """``features[T, C_dec, H', W']`` convolved with ``cond_weights[N_q, C_dec + 1]``.

    Returns mask logits ``[N_q, T, H', W']``; the same kernel is applied to
    every frame.
    """
    n, cd, Hp, Wp = features.shape
    if cond_weights.shape[-1] != cd + 1:
        raise ContractError(f"kernel length {cond_weights.shape[-1] - 1} != decoder channels {cd}")
    kernel = cond_weights[:, :cd]
    bias = cond_weights[:, cd:]
    flat = features.transpose(1, 0, 2, 3).reshape(cd, n * Hp * Wp)
    logits = T.matmul(kernel, flat) + bias
    return logits.reshape(cond_weights.shape[0], n, Hp, Wp)


class MaskDecoder(Module):
    def __init__(self, cfg: AttentionConfig, num_layers: int, num_queries: int, num_classes: int,
                 dec_channels: int, skip_channels: tuple[int, int], rng: np.random.Generator,
                 dropout_rng: np.random.Generator | None = None, include_memory: bool = True):
        self.queries = param(rng.normal(0.0, 1.0, size=(num_queries, cfg.model_dim)))
        self.layers = [DecoderLayer(cfg, rng, dropout_rng) for _ in range(num_layers)]
        self.class_head = ClassificationHead(cfg.model_dim, num_classes, rng)
        self.seg_head = SegmentationHead(cfg.model_dim, dec_channels, rng)
        self.spatial = SpatialDecoder(cfg.model_dim, dec_channels, skip_channels, rng)
        self.cfg = cfg
        self.include_memory = include_memory

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    def key_tokens(self, enc: EncoderOutput, H: int, W: int, slot_pos: Tensor | None = None):
        """All frames' tokens (and memory tokens) with their positional encodings."""
        f = enc.frame_tokens
        n, HW, C = f.shape
        tpos = sinusoidal_1d(n, C).table
        spos = sinusoidal_2d(H, W, C).table
        keys = [f.reshape(n * HW, C)]
        pos = [Tensor((spos[None] + tpos[:, None]).reshape(n * HW, C))]
        if self.include_memory and enc.memory_tokens is not None:
            m = enc.memory_tokens
            M = m.shape[1]
            keys.append(m.reshape(n * M, C))
            mp = np.repeat(tpos, M, axis=0)
            if slot_pos is not None:
                pos.append(Tensor(mp) + T.mul(Tensor(np.ones((n, 1, 1))), slot_pos).reshape(n * M, C))
            else:
                pos.append(Tensor(mp))
        return T.concat(keys, axis=0), T.concat(pos, axis=0)

    def decode_queries(self, enc: EncoderOutput, H: int, W: int, slot_pos: Tensor | None = None) -> Tensor:
        keys, pos = self.key_tokens(enc, H, W, slot_pos)
        if keys.shape[0] == 0:
            raise ContractError("empty encoder output")
        x = self.queries
        for layer in self.layers:
            x = layer(x, keys, memory_pos=pos)
        return x
