"""Parameter-efficient adaptation of a frozen masked language model for video question answering.

A frozen bidirectional encoder is extended with deep key/value text prompts,
residual bottleneck adapters and a latent cross-attention visual mapper, all
on a small float64 reverse-mode autodiff core.
"""

from .errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    InputError,
    ManifestError,
    NumericError,
    PromptQAError,
    ShapeError,
    StateError,
    VocabError,
)
from .gradcheck import GradCheckReport, grad_check
from .model import Batch, ModelConfig, VideoQAModel, parameter_counts
from .prompts import PromptBank, TextPromptSet, fold, materialize, prompt_param_count
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ConfigError",
    "DataFormatError",
    "DivergenceError",
    "GradCheckReport",
    "InputError",
    "ManifestError",
    "ModelConfig",
    "NumericError",
    "PromptBank",
    "PromptQAError",
    "ShapeError",
    "StateError",
    "Tensor",
    "TextPromptSet",
    "VideoQAModel",
    "VocabError",
    "fold",
    "grad_check",
    "materialize",
    "no_grad",
    "parameter_counts",
    "prompt_param_count",
]
