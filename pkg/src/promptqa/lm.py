"""Frozen bidirectional encoder with prompt/adapter attachment points and an MLM head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as F
from .errors import ConfigError, InputError, ShapeError, VocabError
from .nn import LayerNorm, LMLayer, Module, frozen_layer_forward, lm_layer_forward, normal
from .tensor import Tensor
from .text import MASK_ID


class FrozenLM(Module):
    """Token/position embeddings, C encoder layers, and a tied or untied vocabulary head.

    Everything here is created frozen except the adapters inside the layers.
    """

    def __init__(
        self,
        vocab_size: int,
        d_model: int = 64,
        n_layers: int = 4,
        n_heads: int = 4,
        ffn_dim: int | None = None,
        max_positions: int = 128,
        adapter_dim: int | None = None,
        tie_head: bool = True,
        rng: np.random.Generator | None = None,
        embed_std: float = 1.0,
        eps: float = 1e-5,
    ):
        rng = np.random.default_rng(0) if rng is None else rng
        self.token_embedding = normal(rng, (vocab_size, d_model), embed_std, False)
        self.position_embedding = normal(rng, (max_positions, d_model), 0.1 * embed_std, False)
        self.embed_norm = LayerNorm(d_model, trainable=False, eps=eps)
        ffn_dim = ffn_dim or 4 * d_model
        self.layers = [LMLayer(d_model, n_heads, ffn_dim, rng, adapter_dim, eps) for _ in range(n_layers)]
        self.tie_head = tie_head
        if not tie_head:
            self.head_weight = normal(rng, (vocab_size, d_model), 1.0 / math.sqrt(d_model), False)
        self.head_bias = Tensor(np.zeros(vocab_size))

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def d_model(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def max_positions(self) -> int:
        return self.position_embedding.shape[0]

    @property
    def head(self) -> Tensor:
        return self.token_embedding if self.tie_head else self.head_weight

    def adapter_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if ".adapter_" in n]

    def frozen_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if ".adapter_" not in n]


def embed_text(lm: FrozenLM, token_ids, mask_positions=None) -> Tensor:
    """Look up token embeddings (B x D x S, or D x S for a 1-D id list).

    ``mask_positions`` (a boolean array shaped like ``token_ids`` or, for
    1-D input, a list of indices) are replaced by the mask token embedding.
    """
    ids = np.array(token_ids, dtype=np.int64)
    if ids.ndim not in (1, 2):
        raise ShapeError(f"token ids must be 1-D or 2-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= lm.vocab_size):
        bad = ids[(ids < 0) | (ids >= lm.vocab_size)]
        raise InputError(f"token id {int(bad[0])} outside vocabulary of {lm.vocab_size}")
    if mask_positions is not None:
        mask = np.asarray(mask_positions)
        if mask.dtype != bool:
            mask = mask.astype(np.int64)
        ids[mask] = MASK_ID
    table = lm.token_embedding.data
    emb = np.swapaxes(table[ids], -1, -2)
    return Tensor(np.ascontiguousarray(emb))


@dataclass
class RestrictedHead:
    """Vocabulary head cut down to the rows of the answer tokens."""

    weight: Tensor  # U' x D
    bias: Tensor  # U'
    token_ids: list[int]
    answer_rows: list[list[int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)


def restrict_head(lm: FrozenLM, vocab) -> RestrictedHead:
    """Keep only the head rows of tokens used by ``vocab``'s answers.

    Rows are ordered by first appearance over the answers; ``answer_rows``
    maps each answer to its tokens' row indices.
    """
    token_ids: list[int] = []
    row_of: dict[int, int] = {}
    answer_rows = []
    for toks in vocab.token_ids:
        rows = []
        for t in toks:
            if not 0 <= t < lm.vocab_size:
                raise VocabError(f"answer token id {t} is not in the {lm.vocab_size}-token head")
            if t not in row_of:
                row_of[t] = len(token_ids)
                token_ids.append(t)
            rows.append(row_of[t])
        answer_rows.append(rows)
    idx = np.array(token_ids, dtype=np.int64)
    return RestrictedHead(
        Tensor(lm.head.data[idx]), Tensor(lm.head_bias.data[idx]), token_ids, answer_rows
    )


@dataclass
class LMOutput:
    hidden: Tensor  # B x D x K
    logits: Tensor | None  # U x P, one column per masked position


def _positions(mask_positions, batch: int) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(mask_positions, dtype=np.int64)
    if pos.ndim == 1:
        if batch != 1:
            raise ShapeError("batched input needs (batch, position) pairs for the masked positions")
        return np.zeros(pos.size, dtype=np.int64), pos
    return pos[:, 0], pos[:, 1]


def lm_forward(
    lm: FrozenLM,
    z_v: Tensor | None,
    z_t: Tensor,
    prompts: Sequence[tuple[Tensor, Tensor]] | None = None,
    valid=None,
    mask_positions=None,
    head: RestrictedHead | None = None,
    drop=None,
) -> LMOutput:
    """Run the encoder over ``(Z_v, Z_t)`` of length K = M + S.

    ``valid`` (B x K, True = real token) excludes padding from the keys;
    prompt keys are always attendable. ``mask_positions`` index the
    concatenated sequence and select the columns that get logits.
    """
    squeeze = z_t.ndim == 2
    if squeeze:
        z_t = F.reshape(z_t, (1,) + z_t.shape)
        if z_v is not None:
            z_v = F.reshape(z_v, (1,) + z_v.shape)
    b, d, s = z_t.shape
    z = z_t if z_v is None or z_v.shape[-1] == 0 else F.concat([z_v, z_t], axis=-1)
    k = z.shape[-1]
    if k > lm.max_positions:
        raise ConfigError(f"sequence length {k} exceeds the {lm.max_positions} position embeddings")
    if prompts is not None and len(prompts) != len(lm.layers):
        raise ShapeError(f"{len(prompts)} prompt pairs for {len(lm.layers)} layers")

    z = z + F.swap_last(lm.position_embedding[:k])
    z = lm.embed_norm(z)
    if drop is not None:
        z = drop(z)

    key_valid = None if valid is None else np.broadcast_to(np.asarray(valid, dtype=bool), (b, k))
    for i, layer in enumerate(lm.layers):
        p_k, p_v = prompts[i] if prompts is not None else (None, None)
        mask = key_valid
        if mask is not None and p_k is not None and p_k.shape[-1]:
            mask = np.concatenate([np.ones((b, p_k.shape[-1]), dtype=bool), mask], axis=1)
        z = lm_layer_forward(z, layer, p_k, p_v, mask, drop)

    logits = None
    if mask_positions is not None:
        bi, ki = _positions(mask_positions, b)
        picked = F.getitem(F.swap_last(z), (bi, ki))  # P x D
        w, bias = (lm.head, lm.head_bias) if head is None else (head.weight, head.bias)
        logits = F.matmul(w, F.swap_last(picked)) + F.reshape(bias, (bias.shape[0], 1))
    hidden = F.reshape(z, z.shape[1:]) if squeeze else z
    return LMOutput(hidden, logits)


def bare_encoder_forward(lm: FrozenLM, z_t: Tensor, valid=None) -> Tensor:
    """Reference pass through the backbone alone (no prompts, adapters or video)."""
    squeeze = z_t.ndim == 2
    z = F.reshape(z_t, (1,) + z_t.shape) if squeeze else z_t
    b, _, k = z.shape
    z = lm.embed_norm(z + F.swap_last(lm.position_embedding[:k]))
    mask = None if valid is None else np.broadcast_to(np.asarray(valid, dtype=bool), (b, k))
    for layer in lm.layers:
        z = frozen_layer_forward(z, layer, mask)
    return F.reshape(z, z.shape[1:]) if squeeze else z
