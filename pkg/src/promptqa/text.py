"""Word-level tokenizer, the four QA input templates, and masking policies."""

from __future__ import annotations

import enum
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, MASK, UNK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)
SPECIAL_IDS = frozenset(range(len(SPECIALS)))

_TOKEN_RE = re.compile(r"(\[(?:PAD|CLS|SEP|MASK|UNK)\])|(\w+|[^\w\s])")
_ATTACH_LEFT = set(".,?!:;")


def normalize(text: str) -> str:
    """Lowercase everything except special tokens and collapse whitespace."""
    parts = re.split(r"(\[(?:PAD|CLS|SEP|MASK|UNK)\])", text)
    out = "".join(p if p in SPECIALS else p.lower() for p in parts)
    return " ".join(out.split())


def split_words(text: str) -> list[str]:
    return [special or word.lower() for special, word in _TOKEN_RE.findall(text)]


class Tokenizer:
    """Word-level vocabulary. Ids 0-4 are the specials in fixed order."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise InputError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Tokenizer":
        counts = Counter(w for t in texts for w in split_words(t) if w not in SPECIALS)
        words = sorted(w for w, c in counts.items() if c >= min_count)
        return cls(list(SPECIALS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        for i in ids:
            tok = self.tokens[i]
            if out and tok in _ATTACH_LEFT:
                out[-1] += tok
            else:
                out.append(tok)
        return " ".join(out)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


class TemplateId(enum.IntEnum):
    PLAIN = 1
    INSTRUCTION_FIRST = 2
    ANSWER_CUE = 3
    FULL_CUES = 4


# (prefix before question, text between "?" and the answer slot, subtitle cue)
_TEMPLATES = {
    TemplateId.PLAIN: ("", "", ""),
    TemplateId.INSTRUCTION_FIRST: ("Answer the question: ", "", ""),
    TemplateId.ANSWER_CUE: ("", "Answer: ", ""),
    TemplateId.FULL_CUES: ("Question: ", "Answer: ", "Subtitles: "),
}


def template_words() -> list[str]:
    """Every non-special word the four templates can emit."""
    return sorted({w for parts in _TEMPLATES.values() for p in parts for w in split_words(p)} | {"?", "."})


def clean_question(question: str) -> str:
    q = normalize(question)
    while q.endswith("?"):
        q = q[:-1].rstrip()
    return q


@dataclass
class RenderedText:
    text: str
    ids: list[int]
    answer_positions: list[int]
    answer_ids: list[int] = field(default_factory=list)

    @property
    def mask_positions(self) -> list[int]:
        return [p for p in self.answer_positions if self.ids[p] == MASK_ID]


def render_template(
    tokenizer: Tokenizer,
    template: TemplateId | int,
    question: str,
    answer: str | None = None,
    subtitles: str | None = None,
    max_len: int | None = None,
) -> RenderedText:
    """Fill one of the four input designs.

    With ``answer=None`` the slot holds a single [MASK]; otherwise it holds
    the answer's tokens, whose positions are recorded for masking. When the
    result exceeds ``max_len`` tokens, subtitle words are dropped from the
    end first, then question words.
    """
    template = TemplateId(template)
    prefix, cue, sub_cue = _TEMPLATES[template]
    q_words = clean_question(question).split()
    if not q_words:
        raise InputError("question is empty")
    sub_words = normalize(subtitles).split() if subtitles else []
    slot = normalize(answer).split() if answer is not None else [MASK]
    if answer is not None and not slot:
        raise InputError("answer is empty")

    def assemble(qw: list[str], sw: list[str]) -> tuple[str, list[str], int]:
        head = f"{CLS} {prefix}{' '.join(qw)}? {cue}"
        text = head + " ".join(slot) + "."
        if sw:
            text += f" {sub_cue}{' '.join(sw)}"
        text += f" {SEP}"
        return text, split_words(text), len(split_words(head))

    text, words, start = assemble(q_words, sub_words)
    if max_len is not None:
        while len(words) > max_len and sub_words:
            sub_words = sub_words[:-1]
            text, words, start = assemble(q_words, sub_words)
        while len(words) > max_len and len(q_words) > 1:
            q_words = q_words[:-1]
            text, words, start = assemble(q_words, sub_words)
        if len(words) > max_len:
            raise InputError(f"template needs {len(words)} tokens even after truncation, limit is {max_len}")
    ids = [tokenizer.index.get(w, UNK_ID) for w in words]
    positions = list(range(start, start + len(slot)))
    return RenderedText(text, ids, positions, [ids[p] for p in positions] if answer is not None else [])


def encode_caption(tokenizer: Tokenizer, caption: str, max_len: int | None = None) -> list[int]:
    ids = tokenizer.encode(normalize(caption))
    if max_len is not None:
        ids = ids[: max_len - 2]
    return [CLS_ID] + ids + [SEP_ID]


@dataclass
class MaskedText:
    ids: list[int]
    mask_positions: list[int]
    labels: list[int]


def mlm_mask(
    token_ids: Sequence[int],
    p_mask: float,
    rng: np.random.Generator,
    protected_positions: Iterable[int] = (),
) -> MaskedText:
    """Independently replace each maskable token by [MASK] with probability ``p_mask``.

    Special tokens and ``protected_positions`` are never masked. At least
    one position is always masked (the draw is repeated until one is).
    """
    if not 0.0 < p_mask < 1.0:
        raise ConfigError(f"mask probability must lie in (0, 1), got {p_mask}")
    protected = set(protected_positions)
    candidates = np.array(
        [i for i, t in enumerate(token_ids) if t not in SPECIAL_IDS and i not in protected], dtype=np.int64
    )
    if candidates.size == 0:
        raise InputError("no maskable position: every token is special or protected")
    while True:
        chosen = candidates[rng.random(candidates.size) < p_mask]
        if chosen.size:
            break
    ids = list(token_ids)
    labels = [ids[i] for i in chosen]
    for i in chosen:
        ids[i] = MASK_ID
    return MaskedText(ids, [int(i) for i in chosen], labels)


def downstream_mask(rendered: RenderedText) -> MaskedText:
    """Mask exactly the answer slot; nothing else is touched.

    A slot rendered with answer tokens yields one [MASK] per answer token
    with the original ids as labels; an inference rendering (single [MASK]
    already in the slot) yields that one position and no labels.
    """
    ids = list(rendered.ids)
    if not rendered.answer_ids:
        return MaskedText(ids, list(rendered.answer_positions), [])
    for p in rendered.answer_positions:
        ids[p] = MASK_ID
    return MaskedText(ids, list(rendered.answer_positions), list(rendered.answer_ids))
