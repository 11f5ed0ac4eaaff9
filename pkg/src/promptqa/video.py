"""Precomputed frame features: the VFF1 file format, frame sampling, projection.

VFF1 layout (little endian)::

    offset 0   4 bytes   magic b"VFF1"
    offset 4   uint32    frame count T_raw
    offset 8   uint32    feature dim F
    offset 12  uint32    float width in bytes (4 or 8)
    offset 16  T_raw * F floats, frame-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ShapeError
from .nn import Module, normal
from .tensor import Tensor

MAGIC = b"VFF1"
HEADER = struct.Struct("<4sIII")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class FrameFeatureFile:
    frames: np.ndarray  # T_raw x F
    float_width: int = 4

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ShapeError(f"frame features must be T x F, got {self.frames.shape}")
        if self.float_width not in _DTYPES:
            raise DataFormatError(f"float width must be 4 or 8, got {self.float_width}")
        self.frames = self.frames.astype(_DTYPES[self.float_width])

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, self.n_frames, self.feature_dim, self.float_width)
        return head + self.frames.tobytes(order="C")

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FrameFeatureFile":
        if len(buf) < HEADER.size:
            raise DataFormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", offset=len(buf))
        magic, t_raw, dim, width = HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise DataFormatError(f"bad magic {magic!r}", offset=0)
        if width not in _DTYPES:
            raise DataFormatError(f"unsupported float width {width}", offset=12)
        expected = HEADER.size + t_raw * dim * width
        if len(buf) != expected:
            raise DataFormatError(
                f"payload holds {len(buf) - HEADER.size} bytes, header promises {t_raw * dim * width}",
                offset=min(len(buf), expected),
            )
        frames = np.frombuffer(buf, dtype=_DTYPES[width], offset=HEADER.size).reshape(t_raw, dim)
        bad = ~np.isfinite(frames)
        if bad.any():
            first = int(np.flatnonzero(bad.reshape(-1))[0])
            raise DataFormatError("non-finite feature value", offset=HEADER.size + first * width)
        return cls(frames.copy(), width)

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path) -> "FrameFeatureFile":
        return cls.from_bytes(Path(path).read_bytes())


def sample_indices(n_raw: int, n_target: int) -> list[int]:
    """``floor(i * T_raw / T_target)`` when there are enough frames, else all of them."""
    if n_raw >= n_target:
        return [(i * n_raw) // n_target for i in range(n_target)]
    return list(range(n_raw))


def load_and_sample(source, n_target: int) -> tuple[Tensor, np.ndarray]:
    """Return F x T_target features and the T_target validity flags (False = zero padding)."""
    ff = source if isinstance(source, FrameFeatureFile) else FrameFeatureFile.read(source)
    idx = sample_indices(ff.n_frames, n_target)
    out = np.zeros((ff.feature_dim, n_target))
    out[:, : len(idx)] = ff.frames[idx].T
    valid = np.zeros(n_target, dtype=bool)
    valid[: len(idx)] = True
    return Tensor(out), valid


class FrameProjector(Module):
    """Bias-free linear map F -> D, so zero-padded frames stay exactly zero."""

    def __init__(self, feature_dim: int, d_model: int, rng: np.random.Generator, trainable: bool = True):
        self.weight = normal(rng, (d_model, feature_dim), 1.0 / np.sqrt(feature_dim), trainable)


def project(projector: FrameProjector, y_raw: Tensor) -> Tensor:
    if y_raw.shape[-2] != projector.weight.shape[1]:
        raise ShapeError(f"features have dim {y_raw.shape[-2]}, projector expects {projector.weight.shape[1]}")
    return projector.weight @ y_raw


@dataclass
class SynthSpec:
    """Recipe for a synthetic clip.

    Frames are Gaussian noise plus, when ``class_id`` is set, ``signal``
    times a unit direction shared by every clip of that class (directions
    are drawn from ``signal_seed`` so separate clips agree on them).
    """

    n_frames: int = 10
    feature_dim: int = 768
    class_id: int | None = None
    n_classes: int = 8
    signal: float = 3.0
    noise: float = 1.0
    signal_seed: int = 1234
    float_width: int = 4


def class_directions(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.signal_seed)
    dirs = rng.normal(size=(spec.n_classes, spec.feature_dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def synth_features(spec: SynthSpec, seed: int) -> FrameFeatureFile:
    rng = np.random.default_rng(seed)
    frames = rng.normal(0.0, spec.noise, size=(spec.n_frames, spec.feature_dim))
    if spec.class_id is not None:
        frames += spec.signal * class_directions(spec)[spec.class_id]
    return FrameFeatureFile(frames, spec.float_width)
