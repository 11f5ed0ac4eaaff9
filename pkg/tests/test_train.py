import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptqa.data import Item, collate, split_items
from promptqa.errors import ConfigError, DivergenceError, InputError
from promptqa.lm import FrozenLM, RestrictedHead, restrict_head
from promptqa.model import ModelConfig, VideoQAModel, parameter_counts
from promptqa.prompts import prompt_param_count
from promptqa.tensor import Tensor
from promptqa.text import Tokenizer
from promptqa.train import (
    Adam,
    AnswerVocab,
    TrainConfig,
    Trainer,
    build_param_groups,
    build_vocab,
    evaluate,
    fewshot_tasks,
    frozen_hash,
    lr_at,
    majority_baseline,
    sample_fewshot,
    score_answers,
    tensor_hash,
)

from conftest import FINETUNE, load_for_finetune


class TestSchedule:
    def test_endpoints(self):
        assert lr_at(0, 100, 1e-3, 0.1) == 0.0
        assert lr_at(10, 100, 1e-3, 0.1) == 1e-3
        assert lr_at(100, 100, 1e-3, 0.1) == 0.0

    def test_no_warmup(self):
        assert lr_at(0, 10, 2.0, 0.0) == 2.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 500), st.floats(0.0, 0.9))
    def test_single_peak_and_continuity(self, total, warm):
        lrs = np.array([lr_at(s, total, 1.0, warm) for s in range(total + 1)])
        peak = int(np.argmax(lrs))
        assert np.all(np.diff(lrs[: peak + 1]) >= 0) and np.all(np.diff(lrs[peak:]) <= 0)
        assert lrs[-1] == 0.0 and lrs.max() <= 1.0
        step_bound = 1.0 / max(warm * total, 1e-9) + 1.0 / max(total - warm * total, 1e-9)
        assert np.abs(np.diff(lrs)).max() <= step_bound + 1e-12

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_frac=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(base_lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(regime="some")


class TestVocab:
    def test_min_count(self):
        v = build_vocab(["a", "a", "a", "b"], "mincount")
        assert v.answers == ["a"] and v.excluded == {"b": "count"}

    def test_topk_tie_break(self):
        assert build_vocab(["b", "a", "b", "a", "a", "b"], "topk", k=1).answers == ["a"]

    def test_unknown_token_answers_dropped(self):
        tok = Tokenizer.build(["dog cat"])
        v = build_vocab(["dog", "dog", "zebra", "zebra"], "mincount", tok)
        assert v.answers == ["dog"] and v.excluded["zebra"] == "unknown-token"

    def test_empty(self):
        with pytest.raises(ConfigError):
            build_vocab(["a", "b"], "mincount")
        with pytest.raises(InputError):
            build_vocab([], "topk")

    def test_duplicates_rejected(self):
        with pytest.raises(ConfigError):
            AnswerVocab(["a", "a"], [[5], [5]])

    def test_normalized_membership(self):
        v = build_vocab(["Dog", "dog"], "mincount")
        assert "DOG " in v and "cat" not in v and None not in v


def brute_force_best(logit_column, answer_token_ids, token_ids):
    row = {t: i for i, t in enumerate(token_ids)}
    scores = [sum(logit_column[row[t]] for t in toks) / len(toks) for toks in answer_token_ids]
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return best, scores


class TestScoring:
    def test_mean_of_two_tokens(self):
        head = RestrictedHead(Tensor(np.zeros((2, 1))), Tensor(np.zeros(2)), [7, 8], [[0, 1]])
        assert score_answers(np.array([[1.0], [3.0]]), head).scores[0] == 2.0

    def test_brute_force_three_answers(self, rng):
        lm = FrozenLM(20, d_model=4, n_layers=1, n_heads=1, rng=rng)
        vocab = AnswerVocab(["ice cream", "dog", "ice"], [[10, 11], [12], [10]])
        head = restrict_head(lm, vocab)
        for _ in range(50):
            col = rng.normal(size=(len(head), 1))
            ranking = score_answers(col, head)
            best, scores = brute_force_best(col[:, 0], vocab.token_ids, head.token_ids)
            assert ranking.best == best
            np.testing.assert_allclose(ranking.scores, scores, atol=1e-15)
            assert sorted(ranking.order, key=lambda i: -scores[i]) == ranking.order

    def test_single_token_matches_argmax(self, rng):
        head = RestrictedHead(Tensor(np.zeros((5, 1))), Tensor(np.zeros(5)), list(range(5)), [[i] for i in range(5)])
        col = rng.normal(size=5)
        assert score_answers(col, head).best == int(np.argmax(col))

    def test_needs_single_mask(self):
        head = RestrictedHead(Tensor(np.zeros((1, 1))), Tensor(np.zeros(1)), [5], [[0]])
        with pytest.raises(InputError):
            score_answers(np.zeros((1, 2)), head)


def qa_items(answers):
    return [Item(str(i), None, question="q", answer=a) for i, a in enumerate(answers)]


class TestEvaluate:
    def test_oracle(self):
        items = qa_items(["a", "b"] * 5)
        v = AnswerVocab(["a", "b"], [[5], [6]])
        rep = evaluate(lambda xs: [x.answer for x in xs], items, v)
        assert rep.accuracy == 1.0 and rep.n == 10

    def test_all_oov(self):
        items = qa_items(["x", "y", "z"])
        rep = evaluate(lambda xs: [x.answer for x in xs], items, AnswerVocab(["a"], [[5]]))
        assert rep.accuracy == 0.0 and rep.n_oov == 3

    def test_oov_counts_against(self):
        items = qa_items(["a", "b", "zzz", "a"])
        rep = evaluate(lambda xs: [x.answer for x in xs], items, AnswerVocab(["a", "b"], [[5], [6]]))
        assert rep.accuracy == 0.75 and rep.n_oov == 1 and rep.n_correct == 3

    def test_majority(self):
        assert majority_baseline(qa_items(["a", "a", "b"]), qa_items(["a", "b", "b", "b"])) == 0.25


class TestFewShot:
    def test_fraction_one(self):
        items = qa_items("abcdef")
        assert sample_fewshot(items, fraction=1.0) == items

    def test_fraction_one_percent(self):
        assert len(sample_fewshot(qa_items(["a"] * 1000), fraction=0.01)) == 10

    def test_seeded(self):
        items = qa_items([str(i) for i in range(1000)])
        a = sample_fewshot(items, n_shots=32, seed=1)
        assert a == sample_fewshot(items, n_shots=32, seed=1)
        assert a != sample_fewshot(items, n_shots=32, seed=2)
        assert len({x.id for x in a}) == 32

    def test_oversized(self):
        with pytest.raises(InputError):
            sample_fewshot(qa_items("ab"), n_shots=3)

    def test_exactly_one_mode(self):
        with pytest.raises(ConfigError):
            sample_fewshot(qa_items("ab"))

    def test_tasks(self):
        tasks = fewshot_tasks(qa_items([str(i) for i in range(1000)]), 32, 10, seed=0)
        assert len(tasks) == 10 and all(len(t) == 32 for t in tasks)
        assert len({tuple(x.id for x in t) for t in tasks}) == 10
        assert [[x.id for x in t] for t in tasks] == [[x.id for x in t] for t in fewshot_tasks(
            qa_items([str(i) for i in range(1000)]), 32, 10, seed=0)]


class TestAdam:
    def test_matches_reference(self, rng):
        p = Tensor(rng.normal(size=3), requires_grad=True)
        opt = Adam({"g": {"p": p}}, {"g": 0.1})
        ref, m, v = p.data.copy(), np.zeros(3), np.zeros(3)
        for t in range(1, 6):
            g = rng.normal(size=3)
            p.grad = g.copy()
            opt.step(scale=0.5)
            m = 0.9 * m + 0.1 * g
            v = 0.95 * v + 0.05 * g * g
            ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-8)
            np.testing.assert_allclose(p.data, ref, rtol=1e-13, atol=1e-15)

    def test_state_round_trip(self, rng):
        p = Tensor(rng.normal(size=3), requires_grad=True)
        opt = Adam({"g": {"p": p}}, {"g": 0.1})
        p.grad = np.ones(3)
        opt.step()
        other = Adam({"g": {"p": p}}, {"g": 0.1})
        other.load_state_dict(opt.state_dict())
        assert other.t == 1 and np.array_equal(other.m["p"], opt.m["p"])


def tiny_model(**kw):
    cfg = dict(vocab_size=30, d_model=16, n_layers=2, n_heads=2, feature_dim=12, n_frames=4,
               n_visual_prompts=3, n_text_prompts=2, max_positions=32, dropout=0.0)
    cfg.update(kw)
    return VideoQAModel(ModelConfig(**cfg))


class TestParamGroups:
    @pytest.mark.parametrize("regime", ["all", "prompts"])
    def test_disjoint_and_covering(self, regime):
        model = tiny_model()
        g = build_param_groups(model, regime, 1e-3, 1e-2)
        names = [set(g.frozen), set(g.prompts), set(g.rest)]
        assert all(not (a & b) for a, b in itertools.combinations(names, 2))
        assert set.union(*names) == {n for n, _ in model.named_parameters()}
        assert all(n.startswith("prompts.") for n in g.prompts)
        assert all(".adapter_" not in n for n in g.frozen)
        assert {p.requires_grad for p in g.rest.values()} == {regime == "all"}

    def test_prompts_only_gradients_touch_only_prompts(self, toy_corpus, pretrained):
        _, items, tok = toy_corpus
        model = load_for_finetune(pretrained[0])
        vocab = build_vocab([it.answer for it in split_items(items, "train")], "mincount", tok)
        trainer = Trainer(model, TrainConfig(regime="prompts", batch_size=8, max_steps=1), tok, "qa", vocab=vocab)
        batch = collate(
            trainer._encode(trainer.usable(split_items(items, "train"))[:8]), trainer.cache
        )
        trainer.loss(batch).backward()
        with_grad = {n for n, p in model.named_parameters() if p.grad is not None and np.any(p.grad != 0)}
        assert with_grad == {"prompts.text.p_in", "prompts.text.proj", "prompts.visual"}


class TestTrainer:
    def test_divergence_aborts_with_location(self, toy_corpus, pretrained):
        _, items, tok = toy_corpus
        model = load_for_finetune(pretrained[0])
        model.prompts.visual.data[:] = np.nan
        vocab = build_vocab([it.answer for it in split_items(items, "train")], "mincount", tok)
        trainer = Trainer(model, TrainConfig(batch_size=8), tok, "qa", vocab=vocab)
        with pytest.raises(DivergenceError) as err:
            trainer.fit(split_items(items, "train"))
        assert err.value.step == 0 and err.value.batch == 0

    def test_loss_decreases_and_run_is_deterministic(self, toy_corpus, pretrained):
        _, items, tok = toy_corpus
        train = split_items(items, "train")
        vocab = build_vocab([it.answer for it in train], "mincount", tok)
        runs = []
        for _ in range(2):
            log = []
            model = load_for_finetune(pretrained[0])
            trainer = Trainer(model, TrainConfig(**{**FINETUNE, "max_steps": 200}), tok, "qa", vocab=vocab,
                              log=log.append)
            trainer.fit(train)
            runs.append(log)
        assert len(runs[0]) == 200
        assert runs[0] == runs[1]
        first = np.mean([r["loss"] for r in runs[0][:8]])
        last = np.mean([r["loss"] for r in runs[0][-8:]])
        assert last < first

    def test_pretraining_loss_falls(self, pretrained):
        _, history = pretrained
        assert history[-1]["mlm_loss"] < history[0]["mlm_loss"]
        assert all(math.isfinite(h["tokens_per_sec"]) for h in history)

    def test_qa_needs_vocab(self):
        with pytest.raises(ConfigError):
            Trainer(tiny_model(), TrainConfig(), None, "qa")

    def test_frozen_hash_sensitive(self):
        model = tiny_model()
        h = frozen_hash(model)
        model.lm.token_embedding.data[0, 0] += 1e-12
        assert frozen_hash(model) != h
        assert tensor_hash({}) == tensor_hash({})


def test_prompt_share_of_trainable_at_full_scale():
    cfg = ModelConfig(vocab_size=128_100, d_model=1536, n_layers=24, n_heads=24, feature_dim=768,
                      n_frames=10, n_visual_prompts=10, n_text_prompts=10, adapter_dim=192)
    share = prompt_param_count(24, 1536, 10, 10) / parameter_counts(cfg)["trainable"]
    assert 0.005 <= share <= 0.015
