"""Dataset manifests, per-item encoding and batch collation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, ManifestError
from .model import Batch
from .text import (
    PAD_ID,
    TemplateId,
    Tokenizer,
    downstream_mask,
    encode_caption,
    mlm_mask,
    render_template,
    template_words,
)
from .video import load_and_sample


@dataclass
class Item:
    id: str
    feature_path: Path
    question: str | None = None
    answer: str | None = None
    subtitles: str | None = None
    split: str = "train"
    caption: str | None = None


def load_manifest(path, check_files: bool = True) -> list[Item]:
    """Read a JSON-lines manifest; relative feature paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}", [str(path)])
    items = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if "id" not in obj or "feature_path" not in obj:
            raise ManifestError(f"{path}:{lineno}: items need 'id' and 'feature_path'")
        fp = Path(obj["feature_path"])
        items.append(
            Item(
                id=str(obj["id"]),
                feature_path=fp if fp.is_absolute() else path.parent / fp,
                question=obj.get("question"),
                answer=obj.get("answer"),
                subtitles=obj.get("subtitles"),
                split=obj.get("split", "train"),
                caption=obj.get("caption"),
            )
        )
    if check_files:
        missing = [str(it.feature_path) for it in items if not it.feature_path.exists()]
        if missing:
            raise ManifestError(f"{len(missing)} feature file(s) missing: {', '.join(missing[:5])}", missing)
    return items


def write_manifest(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def split_items(items: Sequence[Item], split: str) -> list[Item]:
    return [it for it in items if it.split == split]


class FeatureCache:
    """Loads and samples each feature file once."""

    def __init__(self, n_frames: int):
        self.n_frames = n_frames
        self._cache: dict[Path, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, path: Path) -> tuple[np.ndarray, np.ndarray]:
        if path not in self._cache:
            feats, valid = load_and_sample(path, self.n_frames)
            self._cache[path] = (feats.data, valid)
        return self._cache[path]


@dataclass
class Encoded:
    item: Item
    ids: list[int]
    mask_positions: list[int]
    labels: list[int]


def encode_pretrain(item: Item, tok: Tokenizer, p_mask: float, rng, max_len: int) -> Encoded:
    if not item.caption:
        raise InputError(f"item {item.id} has no caption for pretraining")
    masked = mlm_mask(encode_caption(tok, item.caption, max_len), p_mask, rng)
    return Encoded(item, masked.ids, masked.mask_positions, masked.labels)


def encode_qa(item: Item, tok: Tokenizer, template: int, max_len: int, train: bool) -> Encoded:
    if not item.question:
        raise InputError(f"item {item.id} has no question")
    answer = item.answer if train else None
    rendered = render_template(tok, TemplateId(template), item.question, answer, item.subtitles, max_len)
    masked = downstream_mask(rendered)
    return Encoded(item, masked.ids, masked.mask_positions, masked.labels)


def collate(encoded: Sequence[Encoded], cache: FeatureCache) -> Batch:
    b = len(encoded)
    s = max(len(e.ids) for e in encoded)
    ids = np.full((b, s), PAD_ID, dtype=np.int64)
    text_valid = np.zeros((b, s), dtype=bool)
    positions, labels = [], []
    frames, frame_valid = [], []
    for i, e in enumerate(encoded):
        ids[i, : len(e.ids)] = e.ids
        text_valid[i, : len(e.ids)] = True
        positions.extend((i, p) for p in e.mask_positions)
        labels.extend(e.labels if e.labels else [-1] * len(e.mask_positions))
        f, v = cache.get(e.item.feature_path)
        frames.append(f)
        frame_valid.append(v)
    return Batch(
        ids=ids,
        text_valid=text_valid,
        frames=np.stack(frames),
        frame_valid=np.stack(frame_valid),
        mask_positions=np.array(positions, dtype=np.int64).reshape(-1, 2),
        labels=np.array(labels, dtype=np.int64),
        item_ids=[e.item.id for e in encoded],
    )


def build_tokenizer(items: Sequence[Item]) -> Tokenizer:
    """Vocabulary over every caption, question, answer and subtitle plus all template words."""
    texts = [" ".join(template_words())]
    for it in items:
        texts.extend(t for t in (it.caption, it.question, it.answer, it.subtitles) if t)
    return Tokenizer.build(texts)
