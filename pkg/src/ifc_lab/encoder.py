"""Clip embedding and the space-time transformer encoders.

One :class:`ClipEncoder` holds a single parameter set used by all four
communication types, so variants can be compared with shared weights:

* ``no_comm``         per-frame layers over HW tokens
* ``full_thw``        joint layers over all T*HW tokens
* ``decompose_t_hw``  per-frame spatial layer, then per-location temporal layer
* ``ifc``             Encode-Receive over HW+M tokens per frame, then
                      Gather-Communicate over the memory tokens across frames

The spatial layers double as the Encode-Receive layers and the temporal
layers double as the Gather-Communicate layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module, param
from .tensor import ContractError, Tensor
from .transformer import AttentionConfig, EncoderLayer, sinusoidal_1d, sinusoidal_2d

VARIANTS = ("no_comm", "full_thw", "decompose_t_hw", "ifc")


@dataclass(frozen=True)
class EncoderVariant:
    kind: str = "ifc"
    memory_grouping: str = "decomposed"
    M: int = 8

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ContractError(f"unknown encoder variant {self.kind!r}; choose from {VARIANTS}")
        if self.memory_grouping not in ("decomposed", "unified"):
            raise ContractError(f"unknown memory grouping {self.memory_grouping!r}")
        if self.kind == "ifc" and self.M < 1:
            raise ContractError("ifc needs at least one memory token")


@dataclass
class ClipEmbedding:
    frame_tokens: Tensor  # (T, HW, C)
    memory_tokens: Tensor  # (M, C), shared initial state
    T: int
    H: int
    W: int
    C: int
    M: int
    skips: list[Tensor] = field(default_factory=list)  # finest first: stride 2, stride 4

    @property
    def HW(self) -> int:
        return self.H * self.W


@dataclass
class EncoderOutput:
    frame_tokens: Tensor  # (T, HW, C)
    memory_tokens: Tensor | None  # (T, M, C) for ifc, else None


class Stem(Module):
    """Three stride-2 3x3 conv stages to stride 8; stage outputs double as skips."""

    stride = 8

    def __init__(self, channels: tuple[int, int, int], rng: np.random.Generator):
        c1, c2, c3 = channels
        self.conv1 = Conv2d(3, c1, 3, rng, stride=2)
        self.conv2 = Conv2d(c1, c2, 3, rng, stride=2)
        self.conv3 = Conv2d(c2, c3, 3, rng, stride=2)

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        s2 = T.relu(self.conv1(x))
        s4 = T.relu(self.conv2(s2))
        s8 = T.relu(self.conv3(s4))
        return s8, [s2, s4]


def normalize_frames(frames) -> np.ndarray:
    """uint8 or float (T, H0, W0, 3) frames -> float (T, 3, H0, W0) roughly in [-1, 1]."""
    arr = np.asarray(frames)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ContractError(f"frames must have shape (T, H0, W0, 3), got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 127.5 - 1.0
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float64)


def embed_clip(frames, stem: Stem, memory_init: Tensor) -> ClipEmbedding:
    x = frames if isinstance(frames, Tensor) else Tensor(normalize_frames(frames))
    n, _, H0, W0 = x.shape
    s = stem.stride
    if H0 % s or W0 % s:
        ph, pw = (-H0) % s, (-W0) % s
        raise ContractError(f"frame size {H0}x{W0} not divisible by stem stride {s}; "
                            f"pad by {ph} rows and {pw} columns")
    feat, skips = stem(x)
    _, C, H, W = feat.shape
    tokens = feat.reshape(n, C, H * W).transpose(0, 2, 1)
    return ClipEmbedding(tokens, memory_init, n, H, W, C, memory_init.shape[0], skips)


class ClipEncoder(Module):
    def __init__(self, cfg: AttentionConfig, num_layers: int, M: int, rng: np.random.Generator,
                 dropout_rng: np.random.Generator | None = None, temporal_pos: bool = True,
                 max_joint_tokens: int = 4096):
        self.cfg = cfg
        self.spatial = [EncoderLayer(cfg, rng, dropout_rng) for _ in range(num_layers)]
        self.temporal = [EncoderLayer(cfg, rng, dropout_rng) for _ in range(num_layers)]
        self.memory_init = param(rng.normal(0.0, 1.0, size=(M, cfg.model_dim)))
        self.memory_slot_pos = param(rng.normal(0.0, 0.1, size=(M, cfg.model_dim)))
        self.temporal_pos = temporal_pos
        self.max_joint_tokens = max_joint_tokens
        self.suppress_memory = False

    @property
    def num_layers(self) -> int:
        return len(self.spatial)

    # positional tables ------------------------------------------------------
    def _spatial_pos(self, H: int, W: int) -> np.ndarray:
        return sinusoidal_2d(H, W, self.cfg.model_dim).table

    def _temporal_pos(self, n: int) -> np.ndarray:
        if not self.temporal_pos:
            return np.zeros((n, self.cfg.model_dim))
        return sinusoidal_1d(n, self.cfg.model_dim).table

    # phases ---------------------------------------------------------------
    def encode_receive(self, layer_idx: int, frames: Tensor, memory: Tensor, H: int, W: int) -> Tensor:
        """Per-frame layer over ``[frame tokens; memory tokens]`` -> (T, HW+M, C)."""
        if frames.ndim != 3 or memory.ndim != 3 or frames.shape[0] != memory.shape[0]:
            raise ContractError(f"encode_receive layout: frames {frames.shape}, memory {memory.shape}")
        if frames.shape[1] != H * W:
            raise ContractError("frame tokens must come first and number H*W")
        pos = T.concat([Tensor(self._spatial_pos(H, W)), self.memory_slot_pos], axis=0)
        x = T.concat([frames, memory], axis=1)
        return self.spatial[layer_idx](x, pos)

    def gather_communicate(self, layer_idx: int, memory: Tensor, grouping: str = "decomposed") -> Tensor:
        """Cross-frame layer over memory tokens (T, M, C) -> (T, M, C)."""
        n, M, C = memory.shape
        layer = self.temporal[layer_idx]
        tpos = self._temporal_pos(n)
        if grouping == "decomposed":
            grouped = memory.transpose(1, 0, 2)  # (M, T, C): one group per memory index
            out = layer(grouped, Tensor(tpos))
            return out.transpose(1, 0, 2)
        if grouping == "unified":
            flat = memory.reshape(1, n * M, C)
            out = layer(flat, Tensor(np.repeat(tpos, M, axis=0)))
            return out.reshape(n, M, C)
        raise ContractError(f"unknown memory grouping {grouping!r}")

    def ifc_block(self, layer_idx: int, frames: Tensor, memory: Tensor, H: int, W: int,
                  grouping: str = "decomposed") -> tuple[Tensor, Tensor]:
        if not 0 <= layer_idx < self.num_layers:
            raise ContractError(f"layer index {layer_idx} outside [0, {self.num_layers})")
        HW = H * W
        if self.suppress_memory:
            return self.spatial[layer_idx](frames, self._spatial_pos(H, W)), memory
        out = self.encode_receive(layer_idx, frames, memory, H, W)
        frames, mem_hat = out[:, :HW], out[:, HW:]
        return frames, self.gather_communicate(layer_idx, mem_hat, grouping)

    # variants ---------------------------------------------------------------
    def encode(self, emb: ClipEmbedding, variant: EncoderVariant) -> EncoderOutput:
        x = emb.frame_tokens
        n, HW, C = x.shape
        H, W = emb.H, emb.W
        spos = self._spatial_pos(H, W)

        if variant.kind == "no_comm":
            for layer in self.spatial:
                x = layer(x, spos)
            return EncoderOutput(x, None)

        if variant.kind == "full_thw":
            if n * HW > self.max_joint_tokens:
                raise ContractError(
                    f"full_thw over {n * HW} joint tokens exceeds max_joint_tokens="
                    f"{self.max_joint_tokens}; the attention matrix alone would need "
                    f"{self.cfg.num_heads * (n * HW) ** 2 * 8 / 2**30:.1f} GiB. Use shorter clips, "
                    f"lower resolution, or raise the limit explicitly.")
            pos = np.tile(spos, (n, 1))
            if n > 1:  # a single frame has no temporal axis
                pos = pos + np.repeat(self._temporal_pos(n), HW, axis=0)
            x = x.reshape(1, n * HW, C)
            for layer in self.spatial:
                x = layer(x, pos)
            return EncoderOutput(x.reshape(n, HW, C), None)

        if variant.kind == "decompose_t_hw":
            tpos = self._temporal_pos(n)
            for sl, tl in zip(self.spatial, self.temporal):
                x = sl(x, spos)
                if n > 1:  # temporal attention over one frame is skipped
                    x = tl(x.transpose(1, 0, 2), tpos).transpose(1, 0, 2)
            return EncoderOutput(x, None)

        # ifc
        if variant.M != self.memory_init.shape[0]:
            raise ContractError(f"variant asks for M={variant.M}, encoder holds {self.memory_init.shape[0]}")
        mem = T.mul(Tensor(np.ones((n, 1, 1))), emb.memory_tokens.reshape(1, variant.M, C))
        for l in range(self.num_layers):
            x, mem = self.ifc_block(l, x, mem, H, W, variant.memory_grouping)
        return EncoderOutput(x, None if self.suppress_memory else mem)


def encode_clip(encoder: ClipEncoder, emb: ClipEmbedding, variant: EncoderVariant) -> EncoderOutput:
    return encoder.encode(emb, variant)
