"""Toy video-QA corpora with a planted class signal in the frame features."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import write_manifest
from .video import SynthSpec, synth_features

CLASS_WORDS = ("dog", "cat", "car", "tree", "boat", "ball", "bird", "fish", "horse", "train", "cake", "guitar")
CAPTIONS = (
    "a {w} is shown in the video",
    "the video shows a {w}",
    "footage of a {w} outside",
    "a {w} appears in the scene",
)
QUESTIONS = (
    "what is shown in the video",
    "what object appears in the scene",
    "what does the video show",
)


def make_toy_corpus(
    out_dir,
    n_pretrain: int = 128,
    n_train: int = 64,
    n_val: int = 0,
    n_test: int = 64,
    n_classes: int = 8,
    feature_dim: int = 64,
    n_frames: int = 10,
    signal: float = 3.0,
    seed: int = 0,
    min_frames: int = 4,
    max_frames: int = 20,
) -> Path:
    """Write ``features/*.vff`` and ``manifest.jsonl``; return the manifest path.

    Every clip belongs to one of ``n_classes`` classes, named by a word from
    ``CLASS_WORDS``. Pretraining items carry a caption naming the class; QA
    items carry a question whose answer is the class word. Clip lengths
    vary between ``min_frames`` and ``max_frames`` so padding is exercised.
    """
    if n_classes > len(CLASS_WORDS):
        raise ValueError(f"at most {len(CLASS_WORDS)} classes")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    counter = 0
    for split, n in (("pretrain", n_pretrain), ("train", n_train), ("val", n_val), ("test", n_test)):
        classes = np.resize(np.arange(n_classes), n)
        rng.shuffle(classes)
        for c in classes:
            item_id = f"{split}-{counter:05d}"
            counter += 1
            t_raw = int(rng.integers(min_frames, max_frames + 1))
            spec = SynthSpec(t_raw, feature_dim, int(c), n_classes, signal, signal_seed=seed + 1000)
            synth_features(spec, seed=int(rng.integers(2**31))).write(out / "features" / f"{item_id}.vff")
            word = CLASS_WORDS[c]
            rec = {"id": item_id, "feature_path": f"features/{item_id}.vff", "split": split}
            if split == "pretrain":
                rec["caption"] = CAPTIONS[int(rng.integers(len(CAPTIONS)))].format(w=word)
            else:
                rec["question"] = QUESTIONS[int(rng.integers(len(QUESTIONS)))]
                rec["answer"] = word
            records.append(rec)
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
