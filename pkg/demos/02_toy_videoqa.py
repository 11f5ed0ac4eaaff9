# %% [markdown]
# # Toy video QA end to end
#
# A seeded corpus plants a class-specific offset in each clip's frame
# features, and every question asks for the class word. We pretrain on
# captions with masked-token prediction, then fine-tune on question answering
# in two regimes: every new parameter, or only the prompts.

# %%
import tempfile
import time
from pathlib import Path

import numpy as np

from promptqa.checkpoint import load_checkpoint, save_checkpoint
from promptqa.data import FeatureCache, build_tokenizer, load_manifest, split_items
from promptqa.model import ModelConfig, VideoQAModel
from promptqa.synthetic import make_toy_corpus
from promptqa.train import (
    TrainConfig,
    Trainer,
    build_vocab,
    evaluate,
    frozen_hash,
    majority_baseline,
    model_predictor,
)

work = Path(tempfile.mkdtemp(prefix="promptqa-demo-"))
manifest = make_toy_corpus(work, n_pretrain=256, n_train=64, n_test=64, seed=0)
items = load_manifest(manifest)
tok = build_tokenizer(items)
train, test = split_items(items, "train"), split_items(items, "test")
print(len(items), "items;", len(tok), "tokens;", "example:", train[0].question, "->", train[0].answer)

# %% [markdown]
# ## Caption pretraining

# %%
cfg = ModelConfig(vocab_size=len(tok), d_model=32, n_layers=2, n_heads=2, feature_dim=64, n_frames=10,
                  n_visual_prompts=4, n_text_prompts=4, max_positions=64, dropout=0.0)
model = VideoQAModel(cfg)
start = time.perf_counter()
history = Trainer(
    model, TrainConfig(epochs=5, base_lr=3e-3, prompt_lr=1e-2, dropout=0.0, mask_p=0.3), tok, "mlm",
    cache=FeatureCache(10),
).fit(split_items(items, "pretrain"))
print("epoch losses:", [round(h["mlm_loss"], 2) for h in history], f"({time.perf_counter() - start:.1f}s)")
save_checkpoint(work / "pre.ckpt", model, tok)

# %% [markdown]
# ## Fine-tuning in both regimes

# %%
vocab = build_vocab([it.answer for it in train], "mincount", tok)
print("answer vocabulary:", vocab.answers)
print("majority baseline:", majority_baseline(train, test))

for regime in ("all", "prompts"):
    tuned = load_checkpoint(work / "pre.ckpt").model
    tuned.prompts.text.unfold("reparametrized", np.random.default_rng([cfg.seed, 7]), cfg.input_prompt_dim)
    before = frozen_hash(tuned)
    Trainer(tuned, TrainConfig(epochs=75, max_steps=300, base_lr=3e-3, prompt_lr=1e-2, dropout=0.0,
                               regime=regime), tok, "qa", vocab=vocab).fit(train)
    rep = evaluate(model_predictor(tuned, tok, vocab, 4, FeatureCache(10)), test, vocab)
    print(f"{regime:>7s}: test accuracy {rep.accuracy:.3f}, frozen weights untouched: {frozen_hash(tuned) == before}")

# %% [markdown]
# ## What a prompts-only checkpoint weighs

# %%
save_checkpoint(work / "prompts.ckpt", tuned, prompts_only=True)
save_checkpoint(work / "full.ckpt", tuned, tok, vocab)
print("prompts-only:", (work / "prompts.ckpt").stat().st_size, "bytes")
print("full model:  ", (work / "full.ckpt").stat().st_size, "bytes")
