"""Full model: projector -> (temporal embeddings -> visual mapper) -> prompted, adapted frozen LM."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .lm import FrozenLM, LMOutput, RestrictedHead, embed_text, lm_forward
from .mapper import TemporalEmbedding, VisualMapper, add_temporal_embeddings, map_video
from .nn import Adapter, Module, make_dropout, normal
from .prompts import PromptBank, TextPromptSet, materialize, prompt_param_count
from .tensor import Tensor
from .video import FrameProjector, project


@dataclass
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int | None = None
    max_positions: int = 128
    feature_dim: int = 768
    n_frames: int = 10
    n_visual_prompts: int = 10
    n_text_prompts: int = 10
    prompt_dim: int | None = None
    adapter_dim: int | None = None
    mapper: str = "vpn"
    mapper_layers: int = 2
    mapper_heads: int | None = None
    adapters: bool = True
    reparam: bool = True
    tie_head: bool = True
    dropout: float = 0.1
    embed_std: float = 1.0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.mapper not in ("vpn", "linear"):
            raise ConfigError(f"mapper must be 'vpn' or 'linear', got {self.mapper!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_positions", "feature_dim", "n_frames"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads or self.d_model % self.heads_in_mapper:
            raise ConfigError("head counts must divide d_model")

    @property
    def heads_in_mapper(self) -> int:
        return self.mapper_heads or self.n_heads

    @property
    def bottleneck(self) -> int:
        return self.adapter_dim or max(self.d_model // 8, 1)

    @property
    def input_prompt_dim(self) -> int:
        return self.prompt_dim or max(self.d_model // 8, self.n_text_prompts, 1)

    @property
    def visual_prompt_count(self) -> int:
        return self.n_visual_prompts if self.mapper == "vpn" else 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def parameter_counts(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts per component (no allocation, usable at any scale)."""
    d = cfg.d_model
    counts = {
        "projector": cfg.feature_dim * d,
        "adapters": 2 * cfg.n_layers * Adapter.param_count(d, cfg.bottleneck) if cfg.adapters else 0,
        "mapper": VisualMapper.param_count(d, cfg.mapper_layers) if cfg.mapper == "vpn" else 0,
        "temporal": d * cfg.n_frames if cfg.mapper == "vpn" else 0,
        "visual_prompts": d * cfg.visual_prompt_count,
    }
    if cfg.reparam:
        counts["text_prompts"] = cfg.input_prompt_dim * cfg.n_text_prompts + 2 * cfg.n_layers * d * cfg.input_prompt_dim
    else:
        counts["text_prompts"] = 2 * cfg.n_layers * d * cfg.n_text_prompts
    counts["prompts_folded"] = prompt_param_count(cfg.n_layers, d, cfg.n_text_prompts, cfg.visual_prompt_count)
    counts["trainable"] = sum(
        counts[k] for k in ("projector", "adapters", "mapper", "temporal", "visual_prompts", "text_prompts")
    )
    return counts


@dataclass
class Batch:
    ids: np.ndarray  # B x S token ids (masked positions already [MASK])
    text_valid: np.ndarray  # B x S
    frames: np.ndarray  # B x F x T
    frame_valid: np.ndarray  # B x T
    mask_positions: np.ndarray  # P x 2 (item, text position)
    labels: np.ndarray  # P full-vocabulary token ids (-1 when unknown)
    item_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.ids.shape[0]


class VideoQAModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        self.lm = FrozenLM(
            cfg.vocab_size,
            cfg.d_model,
            cfg.n_layers,
            cfg.n_heads,
            cfg.ffn_dim,
            cfg.max_positions,
            cfg.bottleneck if cfg.adapters else None,
            cfg.tie_head,
            rng,
            cfg.embed_std,
        )
        self.projector = FrameProjector(cfg.feature_dim, cfg.d_model, rng)
        if cfg.mapper == "vpn":
            self.temporal = TemporalEmbedding(cfg.d_model, cfg.n_frames, rng, cfg.init_std)
            self.mapper = VisualMapper(cfg.d_model, cfg.mapper_layers, cfg.heads_in_mapper, rng)
            visual = normal(rng, (cfg.d_model, cfg.n_visual_prompts), cfg.init_std, True)
        else:
            self.temporal = self.mapper = None
            visual = None
        text = TextPromptSet(
            cfg.n_layers,
            cfg.d_model,
            cfg.n_text_prompts,
            "reparametrized" if cfg.reparam else "direct",
            cfg.input_prompt_dim,
            rng,
            cfg.init_std,
        )
        self.prompts = PromptBank(text, visual)

    def named_parameters(self, prefix: str = ""):
        for name in ("lm", "projector", "temporal", "mapper", "prompts"):
            part = getattr(self, name)
            if part is not None:
                yield from part.named_parameters(f"{prefix}{name}.")

    def group_of(self, name: str) -> str:
        if name.startswith("prompts."):
            return "prompts"
        if name.startswith("lm.") and ".adapter_" not in name:
            return "frozen"
        return "rest"

    def grouped_parameters(self) -> dict[str, dict[str, Tensor]]:
        groups: dict[str, dict[str, Tensor]] = {"frozen": {}, "prompts": {}, "rest": {}}
        for name, p in self.named_parameters():
            groups[self.group_of(name)][name] = p
        return groups

    def video_embeddings(self, frames: Tensor, frame_valid: np.ndarray, drop=None) -> tuple[Tensor, np.ndarray]:
        y = project(self.projector, frames)
        if self.mapper is None:
            return y, frame_valid
        y = add_temporal_embeddings(y, self.temporal)
        z_v = map_video(self.mapper, self.prompts.visual, y, frame_valid, drop)
        return z_v, np.ones((frames.shape[0], z_v.shape[-1]), dtype=bool)

    def forward(
        self,
        batch: Batch,
        head: RestrictedHead | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
        dropout: float | None = None,
    ) -> LMOutput:
        p = self.config.dropout if dropout is None else dropout
        drop = make_dropout(p, rng, train)
        z_v, video_valid = self.video_embeddings(Tensor._wrap(batch.frames), batch.frame_valid, drop)
        z_t = embed_text(self.lm, batch.ids)
        pairs = None
        if self.prompts.text.n_prompts:
            pairs = materialize(self.prompts.text)
            if drop is not None:
                pairs = [(drop(pk), drop(pv)) for pk, pv in pairs]
        offset = z_v.shape[-1]
        positions = batch.mask_positions.copy()
        if positions.size:
            positions[:, 1] += offset
        valid = np.concatenate([video_valid, batch.text_valid], axis=1)
        return lm_forward(
            self.lm, z_v, z_t, pairs, valid, positions if positions.size else None, head, drop
        )

    __call__ = forward
