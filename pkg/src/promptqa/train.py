"""Training and evaluation: schedules, Adam with parameter groups, answer vocabularies, scoring."""

from __future__ import annotations

import hashlib
import json
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as F
from .data import Encoded, FeatureCache, Item, collate, encode_pretrain, encode_qa
from .errors import ConfigError, DivergenceError, InputError
from .lm import RestrictedHead, restrict_head
from .model import VideoQAModel
from .tensor import Tensor, no_grad
from .text import UNK_ID, Tokenizer, normalize

REGIMES = ("all", "prompts")
VOCAB_MODES = ("topk", "mincount", "auto")


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 16
    base_lr: float = 2e-5
    prompt_lr: float = 1e-3
    warmup_frac: float = 0.1
    dropout: float = 0.1
    mask_p: float = 0.15
    seed: int = 0
    regime: str = "all"
    template: int = 4
    vocab_mode: str = "mincount"
    topk: int = 1000
    min_count: int = 2
    max_len: int = 128
    max_steps: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup fraction must lie in [0, 1), got {self.warmup_frac}")
        if self.base_lr <= 0 or self.prompt_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.vocab_mode not in VOCAB_MODES:
            raise ConfigError(f"vocab mode must be one of {VOCAB_MODES}, got {self.vocab_mode!r}")
        if self.template not in (1, 2, 3, 4):
            raise ConfigError(f"template must be 1-4, got {self.template}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


def lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warm-up from 0 to ``base_lr`` over the first ``warmup_frac`` of steps, then linear decay to 0."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    warmup = warmup_frac * total_steps
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * (total_steps - step) / (total_steps - warmup)


# ------------------------------------------------------------------ parameter groups


@dataclass
class ParamGroups:
    frozen: dict[str, Tensor]
    prompts: dict[str, Tensor]
    rest: dict[str, Tensor]
    lrs: dict[str, float]
    regime: str

    def trainable(self) -> dict[str, dict[str, Tensor]]:
        groups = {"prompts": self.prompts}
        if self.regime == "all":
            groups["rest"] = self.rest
        return groups


def build_param_groups(model: VideoQAModel, regime: str, base_lr: float, prompt_lr: float) -> ParamGroups:
    """Partition parameters and set ``requires_grad`` to match the regime."""
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
    g = model.grouped_parameters()
    for p in g["frozen"].values():
        p.requires_grad = False
    for p in g["prompts"].values():
        p.requires_grad = True
    for p in g["rest"].values():
        p.requires_grad = regime == "all"
    return ParamGroups(g["frozen"], g["prompts"], g["rest"], {"prompts": prompt_lr, "rest": base_lr}, regime)


def tensor_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def frozen_hash(model: VideoQAModel) -> str:
    return tensor_hash(model.grouped_parameters()["frozen"])


class Adam:
    """Adam without weight decay; one learning rate per group, scaled by the schedule."""

    def __init__(self, groups: dict[str, dict[str, Tensor]], lrs: dict[str, float], betas=(0.9, 0.95), eps=1e-8):
        self.groups = groups
        self.lrs = dict(lrs)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for g in groups.values() for n, p in g.items()}
        self.v = {n: np.zeros_like(p.data) for g in groups.values() for n, p in g.items()}

    def zero_grad(self) -> None:
        for g in self.groups.values():
            for p in g.values():
                p.grad = None

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for gname, params in self.groups.items():
            lr = self.lrs[gname] * scale
            for name, p in params.items():
                if p.grad is None:
                    continue
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad**2
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{n}": a for n, a in self.m.items()}
        out.update({f"v.{n}": a for n, a in self.v.items()})
        out["t"] = np.array([float(self.t)])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for n in self.m:
            if f"m.{n}" in state:
                self.m[n] = state[f"m.{n}"].reshape(self.m[n].shape).copy()
                self.v[n] = state[f"v.{n}"].reshape(self.v[n].shape).copy()


# ------------------------------------------------------------------ answer vocabulary


@dataclass
class AnswerVocab:
    answers: list[str]
    token_ids: list[list[int]]
    counts: dict[str, int] = field(default_factory=dict)
    excluded: dict[str, str] = field(default_factory=dict)
    mode: str = "topk"

    def __post_init__(self):
        if len(set(self.answers)) != len(self.answers):
            raise ConfigError("answer vocabulary has duplicates")
        self.index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self) -> int:
        return len(self.answers)

    def __contains__(self, answer) -> bool:
        return answer is not None and normalize(answer) in self.index

    def to_dict(self) -> dict:
        return {"answers": self.answers, "token_ids": self.token_ids, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerVocab":
        return cls(list(d["answers"]), [list(t) for t in d["token_ids"]], mode=d.get("mode", "topk"))


def build_vocab(
    train_answers: Iterable[str],
    mode: str,
    tokenizer: Tokenizer | None = None,
    k: int = 1000,
    min_count: int = 2,
) -> AnswerVocab:
    """Top-k most frequent answers (ties broken lexicographically) or answers seen ``min_count`` times.

    Answers that would tokenize to [UNK] are dropped; every dropped answer
    is reported in ``excluded`` with the reason.
    """
    answers = [normalize(a) for a in train_answers if a is not None]
    if not answers:
        raise InputError("no training answers to build a vocabulary from")
    counts = Counter(answers)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    excluded: dict[str, str] = {}
    if mode == "topk":
        kept = [a for a, _ in ranked[:k]]
        excluded.update({a: "rank" for a, _ in ranked[k:]})
    elif mode == "mincount":
        kept = [a for a, c in ranked if c >= min_count]
        excluded.update({a: "count" for a, c in ranked if c < min_count})
    else:
        raise ConfigError(f"vocabulary mode must be 'topk' or 'mincount', got {mode!r}")
    final, token_ids = [], []
    for a in kept:
        ids = tokenizer.encode(a) if tokenizer is not None else []
        if tokenizer is not None and (not ids or UNK_ID in ids):
            excluded[a] = "unknown-token"
            continue
        final.append(a)
        token_ids.append(ids)
    if not final:
        raise ConfigError(f"answer vocabulary ({mode}) is empty")
    return AnswerVocab(final, token_ids, dict(counts), excluded, mode)


@dataclass
class Ranking:
    best: int
    order: list[int]
    scores: np.ndarray


def score_answers(logits, head: RestrictedHead) -> Ranking:
    """Score each answer by the mean logit of its tokens at the single [MASK] position."""
    col = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if col.ndim == 2:
        if col.shape[1] != 1:
            raise InputError(f"scoring needs exactly one mask position, got {col.shape[1]}")
        col = col[:, 0]
    scores = np.array([col[rows].mean() for rows in head.answer_rows])
    order = np.argsort(-scores, kind="stable")
    return Ranking(int(order[0]), [int(i) for i in order], scores)


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalReport:
    accuracy: float
    n: int
    n_correct: int
    n_oov: int
    predictions: list[str] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("predictions")
        return d


def evaluate(predict: Callable[[Sequence[Item]], list[str]], items: Sequence[Item], vocab: AnswerVocab) -> EvalReport:
    """Top-1 accuracy by exact (normalized) string match; out-of-vocabulary answers always count wrong."""
    items = list(items)
    if not items:
        return EvalReport(0.0, 0, 0, 0)
    preds = predict(items)
    n_oov = correct = 0
    for it, pred in zip(items, preds):
        if it.answer not in vocab:
            n_oov += 1
            continue
        correct += int(normalize(pred) == normalize(it.answer))
    return EvalReport(correct / len(items), len(items), correct, n_oov, list(preds))


def model_predictor(
    model: VideoQAModel,
    tokenizer: Tokenizer,
    vocab: AnswerVocab,
    template: int,
    cache: FeatureCache,
    batch_size: int = 32,
    max_len: int = 128,
) -> Callable[[Sequence[Item]], list[str]]:
    head = restrict_head(model.lm, vocab)

    def predict(items: Sequence[Item]) -> list[str]:
        out = []
        with no_grad():
            for start in range(0, len(items), batch_size):
                chunk = items[start : start + batch_size]
                batch = collate([encode_qa(it, tokenizer, template, max_len, train=False) for it in chunk], cache)
                logits = model(batch, head=head, train=False).logits.data
                for j in range(len(chunk)):
                    out.append(vocab.answers[score_answers(logits[:, j], head).best])
        return out

    return predict


def majority_baseline(train_items: Sequence[Item], test_items: Sequence[Item]) -> float:
    counts = Counter(normalize(it.answer) for it in train_items if it.answer)
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
    return sum(normalize(it.answer) == top for it in test_items) / max(len(test_items), 1)


# ------------------------------------------------------------------ few-shot sampling


def sample_fewshot(items: Sequence[Item], fraction: float | None = None, n_shots: int | None = None, seed: int = 0):
    """Seeded subsample without replacement, by fraction or by shot count."""
    items = list(items)
    if (fraction is None) == (n_shots is None):
        raise ConfigError("give exactly one of fraction or n_shots")
    if fraction is not None:
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
        n = max(1, int(round(fraction * len(items))))
    else:
        n = n_shots
    if n > len(items) or n <= 0:
        raise InputError(f"cannot draw {n} examples from {len(items)}")
    if n == len(items):
        return items
    idx = np.sort(np.random.default_rng(seed).choice(len(items), size=n, replace=False))
    return [items[i] for i in idx]


def fewshot_tasks(items: Sequence[Item], n_shots: int, n_tasks: int, seed: int = 0) -> list[list[Item]]:
    """``n_tasks`` independent draws, each with its own spawned seed."""
    seeds = np.random.SeedSequence(seed).spawn(n_tasks)
    return [sample_fewshot(items, n_shots=n_shots, seed=int(s.generate_state(1)[0])) for s in seeds]


# ------------------------------------------------------------------ training loop


class Trainer:
    """Owns the optimizer, step counter and RNG for one run.

    ``objective='mlm'`` masks caption tokens and scores the full vocabulary;
    ``objective='qa'`` masks the answer slot and scores the restricted head.
    """

    def __init__(
        self,
        model: VideoQAModel,
        config: TrainConfig,
        tokenizer: Tokenizer,
        objective: str = "mlm",
        vocab: AnswerVocab | None = None,
        cache: FeatureCache | None = None,
        log: Callable[[dict], None] | None = None,
    ):
        if objective not in ("mlm", "qa"):
            raise ConfigError(f"objective must be 'mlm' or 'qa', got {objective!r}")
        if objective == "qa" and vocab is None:
            raise ConfigError("question answering needs an answer vocabulary")
        self.model = model
        self.config = config
        self.tokenizer = tokenizer
        self.objective = objective
        self.vocab = vocab
        self.cache = cache or FeatureCache(model.config.n_frames)
        self.log = log
        self.groups = build_param_groups(model, config.regime, config.base_lr, config.prompt_lr)
        self.optimizer = Adam(self.groups.trainable(), self.groups.lrs)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.total_steps = 0
        self.head = restrict_head(model.lm, vocab) if objective == "qa" else None
        if self.head is not None:
            self._row = {t: i for i, t in enumerate(self.head.token_ids)}

    def usable(self, items: Sequence[Item]) -> list[Item]:
        if self.objective == "mlm":
            return [it for it in items if it.caption]
        return [it for it in items if it.question and it.answer in self.vocab]

    def plan(self, n_items: int) -> int:
        per_epoch = math.ceil(n_items / self.config.batch_size)
        total = per_epoch * self.config.epochs
        if self.config.max_steps is not None:
            total = min(total, self.config.max_steps)
        self.total_steps = total
        return total

    def _encode(self, items: Sequence[Item]) -> list[Encoded]:
        cfg = self.config
        if self.objective == "mlm":
            return [encode_pretrain(it, self.tokenizer, cfg.mask_p, self.rng, cfg.max_len) for it in items]
        return [encode_qa(it, self.tokenizer, cfg.template, cfg.max_len, train=True) for it in items]

    def loss(self, batch) -> Tensor:
        out = self.model(batch, head=self.head, train=True, rng=self.rng, dropout=self.config.dropout)
        if self.head is None:
            targets = batch.labels
        else:
            targets = np.array([self._row[t] for t in batch.labels], dtype=np.int64)
        return F.cross_entropy_from_logits(out.logits, targets, axis=0)

    def train_epoch(self, items: Sequence[Item], epoch: int = 0) -> dict:
        items = self.usable(items)
        if not items:
            raise InputError(f"no usable training items for the {self.objective} objective")
        if not self.total_steps:
            self.plan(len(items))
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(items))
        losses, n_tokens = [], 0
        start = time.perf_counter()
        for b, lo in enumerate(range(0, len(items), self.config.batch_size)):
            if self.step >= self.total_steps:
                break
            chunk = [items[i] for i in order[lo : lo + self.config.batch_size]]
            batch = collate(self._encode(chunk), self.cache)
            scale = lr_at(self.step, self.total_steps, 1.0, self.config.warmup_frac)
            self.optimizer.zero_grad()
            loss = self.loss(batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError("non-finite training loss", step=self.step, batch=b)
            loss.backward()
            self.optimizer.step(scale)
            group = "rest" if "rest" in self.optimizer.groups else "prompts"
            if self.log is not None:
                self.log({"step": self.step, "lr": self.groups.lrs[group] * scale, "loss": value})
            self.step += 1
            losses.append(value)
            n_tokens += int(batch.text_valid.sum())
        elapsed = max(time.perf_counter() - start, 1e-9)
        return {
            "epoch": epoch,
            "steps": len(losses),
            "mlm_loss": float(np.mean(losses)) if losses else float("nan"),
            "first_loss": losses[0] if losses else float("nan"),
            "last_loss": losses[-1] if losses else float("nan"),
            "losses": losses,
            "tokens_per_sec": n_tokens / elapsed,
        }

    def fit(self, items: Sequence[Item]) -> list[dict]:
        usable = self.usable(items)
        self.plan(len(usable))
        history = []
        for epoch in range(self.config.epochs):
            if self.step >= self.total_steps:
                break
            history.append(self.train_epoch(usable, epoch))
        return history


class JsonlLog:
    """Append-only JSON-lines sink for step and evaluation metrics."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
