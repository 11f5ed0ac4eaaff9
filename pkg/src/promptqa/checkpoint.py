"""Sectioned binary checkpoint container.

Layout (little endian)::

    b"PQCK"  uint32 version  uint32 section count
    per section: uint16 name length, name (utf-8), uint64 payload length, payload

The ``config`` section is UTF-8 JSON. Tensor sections are a uint32 index
length, a JSON index ``[[name, shape], ...]`` and the float64 values of
every listed tensor back to back. Text prompts are always stored folded,
so the prompt section holds exactly ``2 C D N + D M`` floats.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, InputError, StateError
from .model import ModelConfig, VideoQAModel
from .text import Tokenizer

MAGIC = b"PQCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_PAYLOAD_LEN = struct.Struct("<Q")
_INDEX_LEN = struct.Struct("<I")
_F64 = np.dtype("<f8")

TENSOR_SECTIONS = ("frozen", "adapters", "prompts", "mapper", "projector", "optimizer")


def _section_of(name: str) -> str:
    if name.startswith("prompts."):
        return "prompts"
    if name.startswith("lm."):
        return "adapters" if ".adapter_" in name else "frozen"
    if name.startswith("projector."):
        return "projector"
    return "mapper"  # mapper blocks and temporal embeddings


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    index = json.dumps([[n, list(a.shape)] for n, a in tensors.items()]).encode()
    body = b"".join(np.ascontiguousarray(a, dtype=_F64).tobytes() for a in tensors.values())
    return _INDEX_LEN.pack(len(index)) + index + body


def _unpack_tensors(payload: bytes, base: int) -> dict[str, np.ndarray]:
    if len(payload) < _INDEX_LEN.size:
        raise DataFormatError("tensor section shorter than its index header", offset=base)
    (n,) = _INDEX_LEN.unpack_from(payload, 0)
    start = _INDEX_LEN.size + n
    if start > len(payload):
        raise DataFormatError("tensor index runs past the section end", offset=base)
    try:
        index = json.loads(payload[_INDEX_LEN.size : start])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataFormatError("unreadable tensor index", offset=base + _INDEX_LEN.size) from exc
    out, pos = {}, start
    for name, shape in index:
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(payload):
            raise DataFormatError(f"tensor {name!r} runs past the section end", offset=base + pos)
        out[name] = np.frombuffer(payload, dtype=_F64, count=count, offset=pos).reshape(shape).copy()
        pos = end
    if pos != len(payload):
        raise DataFormatError(f"{len(payload) - pos} unexplained bytes in tensor section", offset=base + pos)
    return out


def write_container(path, sections: dict[str, bytes]) -> None:
    parts = [_HEAD.pack(MAGIC, VERSION, len(sections))]
    for name, payload in sections.items():
        raw = name.encode()
        parts += [_NAME_LEN.pack(len(raw)), raw, _PAYLOAD_LEN.pack(len(payload)), payload]
    Path(path).write_bytes(b"".join(parts))


def read_container(path) -> dict[str, tuple[int, bytes]]:
    """Return ``{section: (payload offset, payload bytes)}``; raises DataFormatError on any inconsistency."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if len(buf) < _HEAD.size:
        raise DataFormatError("file shorter than the checkpoint header", offset=len(buf))
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    pos, out = _HEAD.size, {}
    for _ in range(count):
        if pos + _NAME_LEN.size > len(buf):
            raise DataFormatError("truncated section header", offset=pos)
        (n,) = _NAME_LEN.unpack_from(buf, pos)
        pos += _NAME_LEN.size
        if pos + n + _PAYLOAD_LEN.size > len(buf):
            raise DataFormatError("truncated section name", offset=pos)
        try:
            name = buf[pos : pos + n].decode()
        except UnicodeDecodeError as exc:
            raise DataFormatError("section name is not UTF-8", offset=pos) from exc
        pos += n
        (size,) = _PAYLOAD_LEN.unpack_from(buf, pos)
        pos += _PAYLOAD_LEN.size
        if pos + size > len(buf):
            raise DataFormatError(f"section {name!r} claims {size} bytes, only {len(buf) - pos} remain", offset=pos)
        out[name] = (pos, buf[pos : pos + size])
        pos += size
    if pos != len(buf):
        raise DataFormatError(f"{len(buf) - pos} trailing bytes after the last section", offset=pos)
    return out


def save_checkpoint(
    path,
    model: VideoQAModel,
    tokenizer: Tokenizer | None = None,
    answer_vocab=None,
    optimizer=None,
    prompts_only: bool = False,
    extra: dict | None = None,
) -> None:
    """Write ``model`` (or only its folded prompts) to ``path``. The live model is not modified."""
    config = {
        "kind": "prompts" if prompts_only else "full",
        "model": model.config.to_dict(),
        "extra": extra or {},
    }
    if not prompts_only:
        if tokenizer is not None:
            config["tokens"] = tokenizer.tokens
        if answer_vocab is not None:
            config["answer_vocab"] = answer_vocab.to_dict()

    tensors: dict[str, dict[str, np.ndarray]] = {s: {} for s in TENSOR_SECTIONS}
    text = model.prompts.text
    tensors["prompts"]["prompts.text.prompts"] = text.block().data
    if model.prompts.visual is not None:
        tensors["prompts"]["prompts.visual"] = model.prompts.visual.data
    if not prompts_only:
        for name, p in model.named_parameters():
            section = _section_of(name)
            if section != "prompts":
                tensors[section][name] = p.data
        if optimizer is not None:
            tensors["optimizer"] = dict(optimizer.state_dict())

    sections = {"config": json.dumps(config, sort_keys=True).encode()}
    for s in TENSOR_SECTIONS:
        if tensors[s]:
            sections[s] = _pack_tensors(tensors[s])
    write_container(path, sections)


@dataclass
class Checkpoint:
    model: VideoQAModel
    kind: str
    tokenizer: Tokenizer | None = None
    answer_vocab: dict | None = None
    optimizer_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _load_config(sections) -> dict:
    if "config" not in sections:
        raise DataFormatError("checkpoint has no config section", offset=0)
    offset, payload = sections["config"]
    try:
        return json.loads(payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataFormatError("unreadable config section", offset=offset) from exc


def load_checkpoint(path, model: VideoQAModel | None = None) -> Checkpoint:
    """Restore a checkpoint.

    A full checkpoint rebuilds the model from its stored config. A
    prompts-only checkpoint needs ``model`` and overwrites its prompts in
    place.
    """
    sections = read_container(path)
    config = _load_config(sections)
    kind = config.get("kind")
    if kind not in ("full", "prompts"):
        raise DataFormatError(f"unknown checkpoint kind {kind!r}", offset=0)
    if kind == "full":
        model = VideoQAModel(ModelConfig.from_dict(config["model"]))
    elif model is None:
        raise StateError("a prompts-only checkpoint must be applied to an existing model")

    values: dict[str, np.ndarray] = {}
    optimizer_state = None
    for s in TENSOR_SECTIONS:
        if s in sections:
            offset, payload = sections[s]
            unpacked = _unpack_tensors(payload, offset)
            if s == "optimizer":
                optimizer_state = unpacked
            else:
                values.update(unpacked)

    if "prompts.text.prompts" not in values:
        raise DataFormatError("checkpoint has no prompt payload", offset=0)
    text = model.prompts.text
    block = values.pop("prompts.text.prompts")
    if block.shape != text.block_shape:
        raise DataFormatError(f"prompt block {block.shape} does not fit model {text.block_shape}", offset=0)
    text.load_block(block)
    if "prompts.visual" in values:
        if model.prompts.visual is None or model.prompts.visual.shape != values["prompts.visual"].shape:
            raise DataFormatError("visual prompt payload does not fit the model", offset=0)
        model.prompts.visual.data = values.pop("prompts.visual")

    if kind == "full":
        params = dict(model.named_parameters())
        for name, p in params.items():
            if name.startswith("prompts."):
                continue
            if name not in values:
                raise DataFormatError(f"checkpoint lacks tensor {name!r}", offset=0)
            if values[name].shape != p.shape:
                raise DataFormatError(f"tensor {name!r} has shape {values[name].shape}, model expects {p.shape}", 0)
            p.data = values.pop(name)
        if values:
            raise DataFormatError(f"checkpoint holds unknown tensors {sorted(values)[:3]}", offset=0)
    tokens = config.get("tokens")
    return Checkpoint(
        model=model,
        kind=kind,
        tokenizer=Tokenizer(tokens) if tokens else None,
        answer_vocab=config.get("answer_vocab"),
        optimizer_state=optimizer_state,
        extra=config.get("extra", {}),
    )


def describe_checkpoint(path) -> dict:
    """Section sizes and tensor inventory, for inspection."""
    sections = read_container(path)
    config = _load_config(sections)
    out = {"kind": config.get("kind"), "model": config.get("model"), "sections": {}}
    for name, (offset, payload) in sections.items():
        entry = {"offset": offset, "bytes": len(payload)}
        if name in TENSOR_SECTIONS:
            tensors = _unpack_tensors(payload, offset)
            entry["tensors"] = len(tensors)
            entry["values"] = int(sum(a.size for a in tensors.values()))
        out["sections"][name] = entry
    return out
