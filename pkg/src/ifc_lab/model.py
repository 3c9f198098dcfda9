"""Full per-clip network: stem -> space-time encoder -> query decoder -> masks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .decoder import MaskDecoder, assemble_masks
from .encoder import ClipEncoder, EncoderOutput, EncoderVariant, Stem, embed_clip
from .layers import Module
from .tensor import Tensor
from .transformer import AttentionConfig


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    memory_tokens: int = 8
    enc_layers: int = 3
    dec_layers: int = 3
    num_queries: int = 20
    dec_channels: int = 0  # 0 -> model_dim // 4
    stem_channels: tuple[int, int] = (16, 32)
    variant: str = "ifc"
    memory_grouping: str = "decomposed"
    temporal_pos: bool = True
    decoder_uses_memory: bool = True
    seed: int = 0

    @property
    def decoder_channels(self) -> int:
        return self.dec_channels or self.model_dim // 4

    @property
    def encoder_variant(self) -> EncoderVariant:
        return EncoderVariant(self.variant, self.memory_grouping, self.memory_tokens)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "stem_channels" in d:
            d["stem_channels"] = tuple(d["stem_channels"])
        return cls(**d)


@dataclass
class Predictions:
    class_logits: Tensor  # (N_q, K+1)
    cond_weights: Tensor  # (N_q, C_dec+1)
    mask_logits: Tensor  # (N_q, T, H', W')
    encoder: EncoderOutput | None = None
    extras: dict = field(default_factory=dict)

    @property
    def class_probs(self) -> np.ndarray:
        z = self.class_logits.data
        e = np.exp(z - z.max(-1, keepdims=True))
        return e / e.sum(-1, keepdims=True)

    @property
    def mask_probs(self) -> np.ndarray:
        return T._sigmoid_np(self.mask_logits.data)


class IFCModel(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.dropout_rng = np.random.default_rng(cfg.seed + 1)
        att = AttentionConfig(cfg.model_dim, cfg.num_heads, cfg.ffn_dim, cfg.dropout)
        c1, c2 = cfg.stem_channels
        self.stem = Stem((c1, c2, cfg.model_dim), rng)
        self.encoder = ClipEncoder(att, cfg.enc_layers, cfg.memory_tokens, rng, self.dropout_rng,
                                   temporal_pos=cfg.temporal_pos)
        self.decoder = MaskDecoder(att, cfg.dec_layers, cfg.num_queries, cfg.num_classes,
                                   cfg.decoder_channels, (c1, c2), rng, self.dropout_rng,
                                   include_memory=cfg.decoder_uses_memory)

    def stem_parameters(self) -> list[Tensor]:
        return self.stem.parameters()

    def transformer_parameters(self) -> list[Tensor]:
        stem_ids = {id(p) for p in self.stem_parameters()}
        return [p for p in self.parameters() if id(p) not in stem_ids]

    def __call__(self, frames, variant: EncoderVariant | None = None) -> Predictions:
        variant = variant or self.cfg.encoder_variant
        emb = embed_clip(frames, self.stem, self.encoder.memory_init)
        enc = self.encoder.encode(emb, variant)
        slot = self.encoder.memory_slot_pos if variant.kind == "ifc" else None
        emb_q = self.decoder.decode_queries(enc, emb.H, emb.W, slot)
        class_logits = self.decoder.class_head.logits(emb_q)
        cond = self.decoder.seg_head(emb_q)
        feats = self.decoder.spatial(enc.frame_tokens, emb.H, emb.W, emb.skips)
        masks = assemble_masks(feats, cond)
        return Predictions(class_logits, cond, masks, enc)
