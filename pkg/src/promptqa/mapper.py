"""Visual mapping network: frame features -> a fixed number of video embeddings.

A stack of blocks, each cross-attention (latents <- frames) followed by
self-attention over the latents. The latents start as the learnable
visual prompts, so the output length M does not depend on video length.
"""

from __future__ import annotations

import numpy as np

from . import tensor as F
from .errors import ConfigError, InputError, ShapeError
from .nn import AttentionBlock, Module, cross_attention, normal, self_attention_block
from .tensor import Tensor


class TemporalEmbedding(Module):
    def __init__(self, d_model: int, max_frames: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = normal(rng, (d_model, max_frames), std, True)

    @property
    def max_frames(self) -> int:
        return self.weight.shape[1]


def add_temporal_embeddings(y: Tensor, emb: TemporalEmbedding) -> Tensor:
    """Add the first T embedding columns to frame features ``y`` (D x T or B x D x T)."""
    t = y.shape[-1]
    if t > emb.max_frames:
        raise ConfigError(f"{t} frames exceed the {emb.max_frames} temporal positions")
    if y.shape[-2] != emb.weight.shape[0]:
        raise ShapeError(f"frame dim {y.shape[-2]} vs embedding dim {emb.weight.shape[0]}")
    return y + emb.weight[:, :t]


class MapperBlock(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.cross = AttentionBlock(d_model, n_heads, rng)
        self.self_attn = AttentionBlock(d_model, n_heads, rng)


class VisualMapper(Module):
    def __init__(self, d_model: int, n_layers: int, n_heads: int, rng: np.random.Generator):
        if n_layers < 0:
            raise ConfigError(f"mapper depth must be >= 0, got {n_layers}")
        self.blocks = [MapperBlock(d_model, n_heads, rng) for _ in range(n_layers)]

    @staticmethod
    def param_count(d_model: int, n_layers: int) -> int:
        # per block: two attention layers (4 D x D each) and two LayerNorms (gain + bias)
        return n_layers * (8 * d_model * d_model + 4 * d_model)


def map_video(stack: VisualMapper, visual_prompts: Tensor, y: Tensor, frame_validity=None, drop=None) -> Tensor:
    """Compress frames ``y`` (D x T, or B x D x T) into D x M (or B x D x M) video embeddings.

    Frames whose validity flag is False are zero-padding and are excluded
    from every cross-attention key set.
    """
    squeeze = y.ndim == 2
    if y.ndim not in (2, 3):
        raise ShapeError(f"frames must be D x T or B x D x T, got {y.shape}")
    if y.shape[-2] != visual_prompts.shape[0]:
        raise ShapeError(f"frame dim {y.shape[-2]} vs prompt dim {visual_prompts.shape[0]}")
    yb = F.reshape(y, (1,) + y.shape) if squeeze else y
    b, d, t = yb.shape
    if frame_validity is None:
        valid = np.ones((b, t), dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(frame_validity, dtype=bool).reshape(-1 if squeeze else b, t), (b, t))
    if not valid.any(axis=1).all():
        raise InputError("empty video: every frame is padding")
    if not stack.blocks:
        return visual_prompts if squeeze else F.broadcast_to(visual_prompts, (b, d, visual_prompts.shape[1]))

    z = F.broadcast_to(visual_prompts, (b, d, visual_prompts.shape[1]))
    for block in stack.blocks:
        z = cross_attention(block.cross, z, yb, key_mask=valid, drop=drop)
        z = self_attention_block(block.self_attn, z, drop=drop)
    return F.reshape(z, z.shape[1:]) if squeeze else z
