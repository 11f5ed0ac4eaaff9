"""Transformer building blocks in the column convention used throughout.

Sequences are stored feature-major: a single sequence is ``D x K`` and a
batch is ``B x D x K``, so every linear map is a left multiplication
``W @ Z``. Biases are stored as ``(D,)`` vectors and broadcast over
positions.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from . import tensor as F
from .errors import ConfigError, ShapeError
from .tensor import Tensor

Dropout = Callable[[Tensor], Tensor]


class Module:
    """Parameter container. Parameters are the ``Tensor`` attributes, found recursively."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def normal(rng: np.random.Generator, shape, std: float, trainable: bool) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=trainable)


def _column(bias: Tensor) -> Tensor:
    return F.reshape(bias, (bias.shape[0], 1))


def _drop(drop: Dropout | None, x: Tensor) -> Tensor:
    return x if drop is None else drop(x)


def make_dropout(p: float, rng: np.random.Generator | None, train: bool) -> Dropout | None:
    """Closure applying inverted dropout with a shared RNG, or None at eval / p=0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return None
    return lambda x: F.dropout(x, p, rng, train=True)


class LayerNorm(Module):
    def __init__(self, d_model: int, trainable: bool = True, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d_model), requires_grad=trainable)
        self.bias = Tensor(np.zeros(d_model), requires_grad=trainable)
        self.eps = eps

    def __call__(self, z: Tensor) -> Tensor:
        # feature axis is -2 in the column convention
        return F.layer_norm(z, self.gain, self.bias, self.eps, axis=-2)


class AttentionLayer(Module):
    """Bias-free multi-head attention projections ``W_Q, W_K, W_V, W_O`` (each D x D)."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, trainable: bool = True, std=None):
        if n_heads <= 0 or d_model % n_heads:
            raise ConfigError(f"heads={n_heads} must divide d_model={d_model}")
        self.n_heads = n_heads
        std = 1.0 / math.sqrt(d_model) if std is None else std
        self.w_q = normal(rng, (d_model, d_model), std, trainable)
        self.w_k = normal(rng, (d_model, d_model), std, trainable)
        self.w_v = normal(rng, (d_model, d_model), std, trainable)
        self.w_o = normal(rng, (d_model, d_model), std, trainable)

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]


def _key_mask(mask, batch: int, n_keys: int) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != n_keys:
        raise ShapeError(f"attention mask covers {mask.shape[-1]} keys, expected {n_keys}")
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (batch, n_keys))
    if mask.shape != (batch, n_keys):
        raise ShapeError(f"attention mask shape {mask.shape}, expected ({batch}, {n_keys})")
    return mask


def attend(
    layer: AttentionLayer,
    queries: Tensor,
    context: Tensor,
    key_mask=None,
    prefix_k: Tensor | None = None,
    prefix_v: Tensor | None = None,
    return_weights: bool = False,
):
    """Batched multi-head attention, ``queries`` B x D x Kq against ``context`` B x D x Kc.

    ``prefix_k`` / ``prefix_v`` (D x N) are prepended to the projected keys
    and values. ``key_mask`` (B x (N + Kc), True = attendable) excludes keys.
    Returns B x D x Kq, plus the B x H x Kq x (N + Kc) weights on request.
    """
    b, d, kq = queries.shape
    if context.shape[0] != b or context.shape[1] != d:
        raise ShapeError(f"attention: queries {queries.shape} and context {context.shape} disagree")
    h = layer.n_heads
    dh = d // h

    q = layer.w_q @ queries
    k = layer.w_k @ context
    v = layer.w_v @ context
    if prefix_k is not None:
        n = prefix_k.shape[-1]
        k = F.concat([F.broadcast_to(prefix_k, (b, d, n)), k], axis=-1)
        v = F.concat([F.broadcast_to(prefix_v, (b, d, n)), v], axis=-1)
    kt = k.shape[-1]
    mask = _key_mask(key_mask, b, kt)

    qh = F.reshape(q, (b, h, dh, kq))
    kh = F.reshape(k, (b, h, dh, kt))
    vh = F.reshape(v, (b, h, dh, kt))
    scores = F.matmul(F.swap_last(qh), kh) * (1.0 / math.sqrt(dh))
    if mask is not None and not mask.all():
        scores = F.masked_fill(scores, ~mask[:, None, None, :])
    weights = F.softmax(scores, axis=-1)
    out = F.reshape(F.matmul(vh, F.swap_last(weights)), (b, d, kq))
    out = layer.w_o @ out
    return (out, weights) if return_weights else out


def _batched(z: Tensor) -> tuple[Tensor, bool]:
    if z.ndim == 2:
        return F.reshape(z, (1,) + z.shape), True
    if z.ndim != 3:
        raise ShapeError(f"expected D x K or B x D x K, got {z.shape}")
    return z, False


def _unbatched(z: Tensor, squeeze: bool) -> Tensor:
    return F.reshape(z, z.shape[1:]) if squeeze else z


def prompted_self_attention(
    layer: AttentionLayer,
    z: Tensor,
    p_k: Tensor | None = None,
    p_v: Tensor | None = None,
    mask=None,
    return_weights: bool = False,
):
    """Self-attention whose keys/values are prefixed with learnable prompts.

    Queries come from ``z`` only, so the output keeps ``z``'s length K
    whatever the prompt count N. ``mask`` covers the N + K keys (prompts
    first).
    """
    if (p_k is None) != (p_v is None):
        raise ShapeError("P_K and P_V must be given together")
    if p_k is not None and p_k.shape != p_v.shape:
        raise ShapeError(f"prompt shapes differ: P_K {p_k.shape} vs P_V {p_v.shape}")
    zb, squeeze = _batched(z)
    if p_k is not None and p_k.shape[0] != zb.shape[1]:
        raise ShapeError(f"prompts have dim {p_k.shape[0]}, sequence has {zb.shape[1]}")
    res = attend(layer, zb, zb, mask, p_k, p_v, return_weights=return_weights)
    if return_weights:
        out, w = res
        return _unbatched(out, squeeze), (F.reshape(w, w.shape[1:]) if squeeze else w)
    return _unbatched(res, squeeze)


class AttentionBlock(Module):
    """Post-norm residual wrapper ``LN(Z + Attn(Z, context))``."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, trainable: bool = True):
        self.attn = AttentionLayer(d_model, n_heads, rng, trainable)
        self.norm = LayerNorm(d_model, trainable)


def cross_attention(block: AttentionBlock, z: Tensor, y: Tensor, key_mask=None, drop=None, return_weights=False):
    """Latents ``z`` (D x M) attend to ``y`` (D x T); residual + LayerNorm around it."""
    zb, squeeze = _batched(z)
    yb, _ = _batched(y)
    if yb.shape[0] != zb.shape[0]:
        yb = F.broadcast_to(yb, (zb.shape[0],) + yb.shape[1:])
    if yb.shape[1] != zb.shape[1]:
        raise ShapeError(f"cross_attention: latent dim {zb.shape[1]} vs frame dim {yb.shape[1]}")
    a, w = attend(block.attn, zb, yb, key_mask, return_weights=True)
    out = _unbatched(block.norm(zb + _drop(drop, a)), squeeze)
    return (out, w) if return_weights else out


def self_attention_block(block: AttentionBlock, z: Tensor, key_mask=None, drop=None) -> Tensor:
    zb, squeeze = _batched(z)
    a = attend(block.attn, zb, zb, key_mask)
    return _unbatched(block.norm(zb + _drop(drop, a)), squeeze)


class Adapter(Module):
    """Residual bottleneck ``Z + W_2 relu(W_1 Z + b_1) + b_2``; ``W_2`` starts at zero."""

    def __init__(self, d_model: int, bottleneck: int, rng: np.random.Generator, std: float = 0.02):
        if bottleneck <= 0:
            raise ConfigError(f"adapter bottleneck must be positive, got {bottleneck}")
        self.w_1 = normal(rng, (bottleneck, d_model), std, True)
        self.b_1 = Tensor(np.zeros(bottleneck), requires_grad=True)
        self.w_2 = Tensor(np.zeros((d_model, bottleneck)), requires_grad=True)
        self.b_2 = Tensor(np.zeros(d_model), requires_grad=True)

    @staticmethod
    def param_count(d_model: int, bottleneck: int) -> int:
        return 2 * d_model * bottleneck + bottleneck + d_model


def adapter_apply(a: Adapter, z: Tensor, drop: Dropout | None = None) -> Tensor:
    hidden = F.relu(a.w_1 @ z + _column(a.b_1))
    return z + _drop(drop, a.w_2 @ hidden + _column(a.b_2))


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator, trainable: bool = False):
        self.w_1 = normal(rng, (hidden, d_model), 1.0 / math.sqrt(d_model), trainable)
        self.b_1 = Tensor(np.zeros(hidden), requires_grad=trainable)
        self.w_2 = normal(rng, (d_model, hidden), 1.0 / math.sqrt(hidden), trainable)
        self.b_2 = Tensor(np.zeros(d_model), requires_grad=trainable)

    def __call__(self, z: Tensor) -> Tensor:
        return self.w_2 @ F.gelu(self.w_1 @ z + _column(self.b_1)) + _column(self.b_2)


class LMLayer(Module):
    """One encoder layer: frozen attention, FFN and norms; optional trainable adapters."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        ffn_dim: int,
        rng: np.random.Generator,
        adapter_dim: int | None = None,
        eps: float = 1e-5,
    ):
        self.attn = AttentionLayer(d_model, n_heads, rng, trainable=False)
        self.norm_1 = LayerNorm(d_model, trainable=False, eps=eps)
        self.ffn = FeedForward(d_model, ffn_dim, rng, trainable=False)
        self.norm_2 = LayerNorm(d_model, trainable=False, eps=eps)
        self.adapter_1 = Adapter(d_model, adapter_dim, rng) if adapter_dim else None
        self.adapter_2 = Adapter(d_model, adapter_dim, rng) if adapter_dim else None


def lm_layer_forward(
    z: Tensor,
    layer: LMLayer,
    p_k: Tensor | None = None,
    p_v: Tensor | None = None,
    mask=None,
    drop: Dropout | None = None,
) -> Tensor:
    """``u = LN1(A1(Z + SA(Z)))``, ``out = LN2(A2(u + FFN(u)))``; adapters sit before each norm."""
    u = z + _drop(drop, prompted_self_attention(layer.attn, z, p_k, p_v, mask))
    if layer.adapter_1 is not None:
        u = adapter_apply(layer.adapter_1, u, drop)
    u = layer.norm_1(u)
    out = u + _drop(drop, layer.ffn(u))
    if layer.adapter_2 is not None:
        out = adapter_apply(layer.adapter_2, out, drop)
    return layer.norm_2(out)


def frozen_layer_forward(z: Tensor, layer: LMLayer, mask=None) -> Tensor:
    """The backbone layer alone: no prompts, no adapters."""
    zb, squeeze = _batched(z)
    u = layer.norm_1(zb + attend(layer.attn, zb, zb, mask))
    return _unbatched(layer.norm_2(u + layer.ffn(u)), squeeze)
