"""Deep key/value text prompts, their low-rank reparametrization, and folding.

All prompt values live in one ``2 x C x D x N`` block: index 0 holds the
key prompts and index 1 the value prompts of each of the C layers. In the
reparametrized mode that block is produced as ``W @ P_in`` (``2CD x D'``
times ``D' x N``) reshaped row-major. Folding evaluates the product once
and discards both factors.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as F
from .errors import ConfigError, StateError
from .nn import Module, normal
from .tensor import Tensor

MODES = ("direct", "reparametrized", "folded")


def prompt_param_count(n_layers: int, d_model: int, n_text_prompts: int, n_visual_prompts: int) -> int:
    """Prompt values kept after folding: ``2 C D N`` text plus ``D M`` visual."""
    return 2 * n_layers * d_model * n_text_prompts + d_model * n_visual_prompts


class TextPromptSet(Module):
    def __init__(
        self,
        n_layers: int,
        d_model: int,
        n_prompts: int,
        mode: str = "reparametrized",
        prompt_dim: int | None = None,
        rng: np.random.Generator | None = None,
        std: float = 0.02,
    ):
        if mode not in ("direct", "reparametrized"):
            raise ConfigError(f"prompt sets are created 'direct' or 'reparametrized', not {mode!r}")
        if n_prompts < 0:
            raise ConfigError(f"prompt count must be >= 0, got {n_prompts}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_layers, self.d_model, self.n_prompts = n_layers, d_model, n_prompts
        self.mode = mode
        self._prompts: Tensor | None = None
        self._p_in: Tensor | None = None
        self._proj: Tensor | None = None
        if mode == "direct":
            self._prompts = normal(rng, self.block_shape, std, True)
        else:
            dim = prompt_dim or max(d_model // 8, n_prompts, 1)
            self._p_in = normal(rng, (dim, n_prompts), std, True)
            self._proj = normal(rng, (2 * n_layers * d_model, dim), std, True)

    @property
    def block_shape(self) -> tuple[int, int, int, int]:
        return (2, self.n_layers, self.d_model, self.n_prompts)

    @property
    def p_in(self) -> Tensor:
        if self.mode != "reparametrized":
            raise StateError(f"input prompts are not available in {self.mode} mode")
        return self._p_in

    @property
    def proj(self) -> Tensor:
        if self.mode != "reparametrized":
            raise StateError(f"the prompt projection is not available in {self.mode} mode")
        return self._proj

    @property
    def prompts(self) -> Tensor:
        if self.mode == "reparametrized":
            raise StateError("reparametrized prompts have no stored block; call materialize()")
        return self._prompts

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        if self.mode == "reparametrized":
            yield prefix + "p_in", self._p_in
            yield prefix + "proj", self._proj
        else:
            yield prefix + "prompts", self._prompts

    def block(self) -> Tensor:
        """The full ``2 x C x D x N`` prompt block (a graph node in reparametrized mode)."""
        if self.mode == "reparametrized":
            return F.reshape(F.matmul(self._proj, self._p_in), self.block_shape)
        return self._prompts

    def fold(self) -> "TextPromptSet":
        """Bake ``W @ P_in`` into a frozen block and drop both factors."""
        if self.mode != "reparametrized":
            raise StateError(f"fold() needs a reparametrized prompt set, this one is {self.mode}")
        data = np.matmul(self._proj.data, self._p_in.data).reshape(self.block_shape)
        self._prompts = Tensor(data, requires_grad=False)
        self._p_in = self._proj = None
        self.mode = "folded"
        return self

    def folded_copy(self) -> "TextPromptSet":
        out = TextPromptSet.__new__(TextPromptSet)
        out.n_layers, out.d_model, out.n_prompts = self.n_layers, self.d_model, self.n_prompts
        out.mode = "folded"
        out._p_in = out._proj = None
        out._prompts = Tensor(self.block().data, requires_grad=False)
        return out

    def unfold(self, mode: str, rng: np.random.Generator | None = None, prompt_dim: int | None = None):
        """Make a direct or folded set trainable again.

        ``mode='direct'`` trains the block itself. ``mode='reparametrized'``
        splits the current block into a fresh pair of factors whose product
        ``W @ P_in`` reproduces it (exact up to rounding when N <= D').
        """
        if self.mode == "reparametrized":
            raise StateError("prompt set is already reparametrized")
        current = self._prompts.data
        if mode == "direct":
            self._prompts = Tensor(current, requires_grad=True)
            self.mode = "direct"
            return self
        if mode != "reparametrized":
            raise ConfigError(f"unknown prompt mode {mode!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        dim = prompt_dim or max(self.d_model // 8, self.n_prompts, 1)
        if self.n_prompts > dim:
            raise ConfigError(
                f"reparametrizing {self.n_prompts} prompts through {dim} input dims cannot reproduce the block"
            )
        # balanced factorization: target = U S Vt, W = U sqrt(S) Q^T, P_in = Q sqrt(S) Vt
        # with Q a random D' x N orthonormal frame, so neither factor dwarfs the other
        target = current.reshape(2 * self.n_layers * self.d_model, self.n_prompts)
        u, s, vt = np.linalg.svd(target, full_matrices=False)
        q, _ = np.linalg.qr(rng.normal(size=(dim, self.n_prompts)))
        root = np.sqrt(s)
        proj = (u * root) @ q.T
        p_in = (q * root) @ vt
        self._p_in = Tensor(p_in, requires_grad=True)
        self._proj = Tensor(proj, requires_grad=True)
        self._prompts = None
        self.mode = "reparametrized"
        return self

    def load_block(self, data: np.ndarray) -> None:
        """Replace the prompt values with a folded block (checkpoint restore)."""
        data = np.asarray(data, dtype=np.float64).reshape(self.block_shape)
        self._prompts = Tensor(data, requires_grad=False)
        self._p_in = self._proj = None
        self.mode = "folded"


def materialize(prompt_set: TextPromptSet) -> list[tuple[Tensor, Tensor]]:
    """Per-layer ``(P_K, P_V)`` pairs, each D x N."""
    block = prompt_set.block()
    return [(block[0, layer], block[1, layer]) for layer in range(prompt_set.n_layers)]


def fold(prompt_set: TextPromptSet) -> TextPromptSet:
    return prompt_set.fold()


class PromptBank(Module):
    """All prompt parameters: text prompt set plus the visual prompts (absent with a linear mapper)."""

    def __init__(self, text: TextPromptSet, visual: Tensor | None):
        self.text = text
        self.visual = visual

    def num_folded_values(self) -> int:
        n = self.text.n_layers * 2 * self.text.d_model * self.text.n_prompts
        return n + (0 if self.visual is None else self.visual.size)
