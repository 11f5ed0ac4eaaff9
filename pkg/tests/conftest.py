"""Shared fixtures: a seeded toy corpus and one pretrained toy checkpoint per session."""

from __future__ import annotations

import numpy as np
import pytest

from promptqa.checkpoint import load_checkpoint, save_checkpoint
from promptqa.data import FeatureCache, build_tokenizer, load_manifest, split_items
from promptqa.model import ModelConfig, VideoQAModel
from promptqa.synthetic import make_toy_corpus
from promptqa.train import TrainConfig, Trainer

ACCEPTANCE_LINES: list[str] = []

TOY_MODEL = dict(
    d_model=32, n_layers=2, n_heads=2, feature_dim=64, n_frames=10,
    n_visual_prompts=4, n_text_prompts=4, max_positions=64, dropout=0.0, seed=0,
)
PRETRAIN = dict(epochs=5, batch_size=16, base_lr=3e-3, prompt_lr=1e-2, dropout=0.0, mask_p=0.3)
FINETUNE = dict(epochs=75, batch_size=16, base_lr=3e-3, prompt_lr=1e-2, dropout=0.0, max_steps=300)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    manifest = make_toy_corpus(out, n_pretrain=256, n_train=64, n_val=16, n_test=64, seed=0)
    items = load_manifest(manifest)
    return manifest, items, build_tokenizer(items)


@pytest.fixture(scope="session")
def pretrained(toy_corpus, tmp_path_factory):
    """Path of a caption-pretrained toy checkpoint plus its pretraining history."""
    _, items, tok = toy_corpus
    model = VideoQAModel(ModelConfig(vocab_size=len(tok), **TOY_MODEL))
    trainer = Trainer(model, TrainConfig(**PRETRAIN), tok, "mlm", cache=FeatureCache(10))
    history = trainer.fit(split_items(items, "pretrain"))
    path = tmp_path_factory.mktemp("ckpt") / "pretrained.ckpt"
    save_checkpoint(path, model, tok)
    return path, history


def load_for_finetune(path, reparam: bool = True) -> VideoQAModel:
    model = load_checkpoint(path).model
    cfg = model.config
    model.prompts.text.unfold(
        "reparametrized" if reparam else "direct", np.random.default_rng([cfg.seed, 7]), cfg.input_prompt_dim
    )
    return model
