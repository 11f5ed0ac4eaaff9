"""Finite-difference gradient suite over every trainable block type.

Each check builds a small random instance of one block, reduces its output
to a scalar through a fixed random projection (a plain sum would hide
errors behind LayerNorm's zero-sum outputs) and hands the block's inputs
and parameters to :func:`grad_check`.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import nn
from . import tensor as F
from .errors import ConfigError
from .gradcheck import grad_check
from .mapper import TemporalEmbedding, VisualMapper, add_temporal_embeddings, map_video
from .model import Batch, ModelConfig, VideoQAModel
from .tensor import Tensor

Check = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
BLOCKS: dict[str, Check] = {}


def register(name: str):
    def deco(fn: Check) -> Check:
        BLOCKS[name] = fn
        return fn

    return deco


def _probe(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=out.shape))
    return lambda y: F.tsum(y * weights)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape))


def _randomize(module: nn.Module, rng, scale=0.3) -> list[Tensor]:
    params = module.parameters()
    for p in params:
        p.data = rng.normal(0.0, scale, size=p.shape)
    return params


def _scalar(fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    probe = _probe(fn(), rng)
    return lambda: probe(fn())


@register("prompted_self_attention")
def _check_prompted_sa(rng):
    layer = nn.AttentionLayer(8, 2, rng)
    params = _randomize(layer, rng, 0.4)
    z, p_k, p_v = _leaf(rng, 2, 8, 4), _leaf(rng, 8, 3), _leaf(rng, 8, 3)
    mask = np.ones((2, 7), dtype=bool)
    mask[1, -1] = False
    fn = lambda: nn.prompted_self_attention(layer, z, p_k, p_v, mask)
    return _scalar(fn, rng), [z, p_k, p_v, *params]


@register("cross_attention")
def _check_cross_attention(rng):
    block = nn.AttentionBlock(8, 2, rng)
    params = _randomize(block.attn, rng, 0.4)
    block.norm.gain.data = rng.normal(1.0, 0.1, size=8)
    block.norm.bias.data = rng.normal(0.0, 0.1, size=8)
    params += [block.norm.gain, block.norm.bias]
    z, y = _leaf(rng, 2, 8, 3), _leaf(rng, 2, 8, 5)
    mask = np.ones((2, 5), dtype=bool)
    mask[0, 3:] = False
    fn = lambda: nn.cross_attention(block, z, y, key_mask=mask)
    return _scalar(fn, rng), [z, y, *params]


@register("adapter")
def _check_adapter(rng):
    adapter = nn.Adapter(8, 3, rng)
    params = _randomize(adapter, rng, 0.5)
    z = _leaf(rng, 2, 8, 4)
    fn = lambda: nn.adapter_apply(adapter, z)
    return _scalar(fn, rng), [z, *params]


@register("layer_norm")
def _check_layer_norm(rng):
    norm = nn.LayerNorm(8)
    norm.gain.data = rng.normal(1.0, 0.2, size=8)
    norm.bias.data = rng.normal(0.0, 0.2, size=8)
    z = _leaf(rng, 2, 8, 4)
    fn = lambda: norm(z)
    return _scalar(fn, rng), [z, norm.gain, norm.bias]


@register("feed_forward")
def _check_ffn(rng):
    ffn = nn.FeedForward(8, 16, rng)
    params = _randomize(ffn, rng, 0.4)
    z = _leaf(rng, 2, 8, 4)
    fn = lambda: ffn(z)
    return _scalar(fn, rng), [z, *params]


@register("mapper_stack")
def _check_mapper(rng):
    mapper = VisualMapper(8, 2, 2, rng)
    temporal = TemporalEmbedding(8, 5, rng, std=0.3)
    params = _randomize(mapper, rng, 0.4) + [temporal.weight]
    prompts, y = _leaf(rng, 8, 3), _leaf(rng, 2, 8, 5)
    valid = np.ones((2, 5), dtype=bool)
    valid[1, 3:] = False
    fn = lambda: map_video(mapper, prompts, add_temporal_embeddings(y, temporal), valid)
    return _scalar(fn, rng), [prompts, y, *params]


@register("lm_layer")
def _check_lm_layer(rng):
    layer = nn.LMLayer(8, 2, 16, rng, adapter_dim=2)
    params = _randomize(layer, rng, 0.4)
    z, p_k, p_v = _leaf(rng, 2, 8, 4), _leaf(rng, 8, 2), _leaf(rng, 8, 2)
    mask = np.ones((2, 6), dtype=bool)
    mask[0, -1] = False
    fn = lambda: nn.lm_layer_forward(z, layer, p_k, p_v, mask)
    return _scalar(fn, rng), [z, p_k, p_v, *params]


def toy_model(seed: int = 0) -> VideoQAModel:
    cfg = ModelConfig(
        vocab_size=12, d_model=8, n_layers=1, n_heads=2, max_positions=16, feature_dim=6,
        n_frames=3, n_visual_prompts=2, n_text_prompts=2, mapper_layers=1, dropout=0.0, seed=seed,
    )
    return VideoQAModel(cfg)


def toy_batch(rng, model: VideoQAModel) -> Batch:
    cfg = model.config
    ids = rng.integers(5, cfg.vocab_size, size=(2, 5))
    ids[:, 0], ids[:, -1] = 1, 2
    ids[0, 2] = ids[1, 3] = 3
    text_valid = np.ones((2, 5), dtype=bool)
    text_valid[1, 4] = False
    frame_valid = np.ones((2, cfg.n_frames), dtype=bool)
    frame_valid[1, -1] = False
    return Batch(
        ids=ids,
        text_valid=text_valid,
        frames=rng.normal(size=(2, cfg.feature_dim, cfg.n_frames)),
        frame_valid=frame_valid,
        mask_positions=np.array([[0, 2], [1, 3]]),
        labels=rng.integers(5, cfg.vocab_size, size=2),
    )


@register("full_model_loss")
def _check_model(rng):
    model = toy_model(int(rng.integers(2**31)))
    for _, adapter in model.lm.adapter_parameters():
        adapter.data = rng.normal(0.0, 0.3, size=adapter.shape)
    batch = toy_batch(rng, model)
    params = [p for name, p in model.named_parameters() if model.group_of(name) != "frozen"]

    def fn():
        out = model(batch, train=False)
        return F.cross_entropy_from_logits(out.logits, batch.labels, axis=0)

    return fn, params


def run_suite(tol: float = 1e-4, eps: float = 1e-5, seed: int = 0, blocks=None) -> dict:
    """Check every registered block; the returned dict is JSON-serializable."""
    names = list(BLOCKS) if blocks is None else list(blocks)
    unknown = [n for n in names if n not in BLOCKS]
    if unknown:
        raise ConfigError(f"unknown blocks {unknown}; known: {sorted(BLOCKS)}")
    order = list(BLOCKS)
    rows = []
    for name in names:
        # seeded by registry position so a subset run checks the same instances
        rng = np.random.default_rng([seed, order.index(name)])
        start = time.perf_counter()
        try:
            fn, inputs = BLOCKS[name](rng)
            report = grad_check(fn, inputs, eps=eps, tol=tol)
            row = {"block": name, "max_rel_error": report.max_rel_error, "passed": bool(report.passed)}
        except Exception as exc:  # a broken block is a failed row, not a crashed suite
            row = {"block": name, "max_rel_error": None, "passed": False, "error": f"{type(exc).__name__}: {exc}"}
        row["seconds"] = round(time.perf_counter() - start, 3)
        rows.append(row)
    return {
        "tol": tol,
        "eps": eps,
        "passed": all(r["passed"] for r in rows),
        "failed": [r["block"] for r in rows if not r["passed"]],
        "blocks": rows,
    }
