# %% [markdown]
# # Prompt banks, folding and parameter budgets
#
# Text prompts are generated from a small input matrix through a shared
# projection while training. After training the product is computed once and
# the two factors are dropped. This notebook checks that the folded bank gives
# the same model output and counts what each part costs.

# %%
import copy

import numpy as np

from promptqa.diagnostics import toy_batch, toy_model
from promptqa.model import ModelConfig, parameter_counts
from promptqa.prompts import fold, prompt_param_count

# %% [markdown]
# ## Fold a trained bank and compare outputs

# %%
model = toy_model(seed=0)
rng = np.random.default_rng(0)
for _, p in model.named_parameters():
    p.data = rng.normal(0.0, 0.5, size=p.shape)

folded = copy.deepcopy(model)
fold(folded.prompts.text)
print("modes:", model.prompts.text.mode, "->", folded.prompts.text.mode)

batch = toy_batch(np.random.default_rng(1), model)
diff = np.abs(model(batch).hidden.data - folded(batch).hidden.data).max()
print("max output difference after folding:", diff)
print("text prompt values while training:", model.prompts.text.num_parameters())
print("text prompt values after folding: ", folded.prompts.text.block().size)

# %% [markdown]
# ## Budgets at full scale
#
# 24 layers, width 1536, 10 text and 10 visual prompts, adapter bottleneck 192.
# Only closed forms are evaluated here; nothing of this size is allocated.

# %%
cfg = ModelConfig(vocab_size=128_100, d_model=1536, n_layers=24, n_heads=24, feature_dim=768,
                  n_frames=10, n_visual_prompts=10, n_text_prompts=10, adapter_dim=192)
counts = parameter_counts(cfg)
for key, value in counts.items():
    print(f"{key:>15s}: {value:>12,d}")
print("prompt_param_count:", f"{prompt_param_count(24, 1536, 10, 10):,d}")

# %% [markdown]
# The folded prompts (text plus visual) are what a prompts-only checkpoint
# stores. Training time needs more because of the projection, which is
# discarded once folded.
