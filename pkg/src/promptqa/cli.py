"""Command-line entry point: synth-data, pretrain, finetune, evaluate, gradcheck, inspect-checkpoint.

Configuration is layered: dataclass defaults, then a flat ``key=value``
file (``--config``), then ``--set key=value`` overrides, then the
dedicated flags. Unknown keys are rejected. The effective configuration
is written to ``<out>/config.txt`` in the same format, so it can be fed
back through ``--config`` to reproduce a run.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import describe_checkpoint, load_checkpoint, save_checkpoint
from .data import FeatureCache, build_tokenizer, load_manifest, split_items
from .diagnostics import run_suite
from .errors import ConfigError, InputError, PromptQAError
from .model import ModelConfig, VideoQAModel, parameter_counts
from .synthetic import make_toy_corpus
from .train import (
    AnswerVocab,
    JsonlLog,
    TrainConfig,
    Trainer,
    build_vocab,
    evaluate,
    fewshot_tasks,
    frozen_hash,
    model_predictor,
    sample_fewshot,
)

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
# base LR used when none is configured; the prompt LR default is shared
_BASE_LR = {"pretrain": 2e-5, "finetune": 3e-5}
_TRUE, _FALSE = {"1", "true", "on", "yes"}, {"0", "false", "off", "no"}


def _field_default(name: str):
    f = _MODEL_FIELDS.get(name) or _TRAIN_FIELDS[name]
    return f.default


def parse_value(key: str, raw: str):
    """Convert ``raw`` to the type of ``key``'s default."""
    if key not in _MODEL_FIELDS and key not in _TRAIN_FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _field_default(key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if default is None:
            return None if raw.lower() in ("none", "") else int(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_pairs(lines, source: str) -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path))


def format_config(values: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "on" if v else "off"
        return "none" if v is None else str(v)

    return "".join(f"{k}={fmt(v)}\n" for k, v in sorted(values.items()))


def effective_config(args) -> dict:
    """Merge defaults, config file, ``--set`` overrides and dedicated flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    values.update(parse_pairs(getattr(args, "set", None) or [], "--set"))
    flags = {
        "seed": getattr(args, "seed", None),
        "regime": getattr(args, "regime", None),
        "template": getattr(args, "template", None),
        "vocab_mode": getattr(args, "vocab", None),
        "mapper": getattr(args, "mapper", None),
    }
    for key in ("reparam", "adapters"):
        flag = getattr(args, key, None)
        flags[key] = None if flag is None else flag == "on"
    values.update({k: v for k, v in flags.items() if v is not None})
    return values


def split_config(values: dict, command: str) -> tuple[dict, TrainConfig]:
    model_kw = {k: v for k, v in values.items() if k in _MODEL_FIELDS}
    train_kw = {k: v for k, v in values.items() if k in _TRAIN_FIELDS}
    train_kw.setdefault("base_lr", _BASE_LR.get(command, 2e-5))
    return model_kw, TrainConfig(**train_kw)


def _echo(out: Path, values: dict, train: TrainConfig, model_cfg: ModelConfig | None) -> None:
    merged = dataclasses.asdict(train)
    if model_cfg is not None:
        merged.update(model_cfg.to_dict())
    merged.update({k: v for k, v in values.items() if k in merged})
    (out / "config.txt").write_text(format_config(merged), encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    manifest = make_toy_corpus(
        out,
        n_pretrain=args.n_pretrain,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        n_classes=args.classes,
        feature_dim=args.feature_dim,
        n_frames=args.frames,
        seed=args.seed if args.seed is not None else 0,
    )
    _print({"manifest": str(manifest)})
    return 0


def cmd_pretrain(args) -> int:
    values = effective_config(args)
    model_kw, tcfg = split_config(values, "pretrain")
    if tcfg.regime != "all":
        raise ConfigError("pretraining updates every new parameter; the prompts-only regime is for fine-tuning")
    items = load_manifest(args.manifest)
    data = [it for it in items if it.caption]
    if not data:
        raise InputError("manifest has no captioned items to pretrain on")
    tok = build_tokenizer(items)
    model_kw["vocab_size"] = len(tok)
    model_kw.setdefault("feature_dim", FeatureCache(1).get(data[0].feature_path)[0].shape[0])
    model_kw.setdefault("seed", tcfg.seed)
    model_kw.setdefault("dropout", tcfg.dropout)
    cfg = ModelConfig(**model_kw)
    out = _out_dir(args)
    _echo(out, values, tcfg, cfg)
    model = VideoQAModel(cfg)
    log = JsonlLog(out / "metrics.jsonl")
    try:
        trainer = Trainer(model, tcfg, tok, "mlm", cache=FeatureCache(cfg.n_frames), log=log)
        history = trainer.fit(data)
    finally:
        log.close()
    save_checkpoint(out / "model.ckpt", model, tok)
    _print(
        {
            "epoch_losses": [h["mlm_loss"] for h in history],
            "steps": trainer.step,
            "tokens_per_sec": float(np.mean([h["tokens_per_sec"] for h in history])),
            "checkpoint": str(out / "model.ckpt"),
        }
    )
    return 0


def _prepare(model: VideoQAModel, cfg_overrides: dict) -> None:
    """Match the loaded model to the requested architecture flags."""
    cfg = model.config
    for key in ("mapper", "adapters", "d_model", "n_layers", "n_text_prompts", "n_visual_prompts"):
        if key in cfg_overrides and cfg_overrides[key] != getattr(cfg, key):
            raise ConfigError(
                f"{key}={cfg_overrides[key]} conflicts with the checkpoint ({key}={getattr(cfg, key)}); "
                "architecture flags must match pretraining"
            )
    if "dropout" in cfg_overrides:
        cfg.dropout = cfg_overrides["dropout"]
    reparam = cfg_overrides.get("reparam", cfg.reparam)
    cfg.reparam = reparam
    model.prompts.text.unfold(
        "reparametrized" if reparam else "direct",
        np.random.default_rng([cfg.seed, 7]),
        cfg.input_prompt_dim,
    )


def _vocab_for(mode: str, train, tok, tcfg: TrainConfig) -> AnswerVocab:
    return build_vocab([it.answer for it in train], mode, tok, k=tcfg.topk, min_count=tcfg.min_count)


def _train_and_eval(base, tok, vocab, tcfg, train, evals, log, tag=None):
    model = copy.deepcopy(base)
    cache = FeatureCache(model.config.n_frames)

    def sink(rec):
        log(rec if tag is None else {**tag, **rec})

    trainer = Trainer(model, tcfg, tok, "qa", vocab=vocab, cache=cache, log=sink)
    trainer.fit(train)
    reports = {}
    for split, items in evals.items():
        rep = evaluate(model_predictor(model, tok, vocab, tcfg.template, cache, max_len=tcfg.max_len), items, vocab)
        sink({"split": split, "accuracy": rep.accuracy, "n": rep.n})
        reports[split] = rep
    return model, trainer, reports


def cmd_finetune(args) -> int:
    values = effective_config(args)
    model_kw, tcfg = split_config(values, "finetune")
    if args.fraction is not None and args.shots is not None:
        raise ConfigError("--fraction and --shots are mutually exclusive")
    if args.tasks is not None and args.shots is None:
        raise ConfigError("--tasks needs --shots")
    ckpt = load_checkpoint(args.init)
    if ckpt.tokenizer is None:
        raise ConfigError(f"{args.init} carries no tokenizer; fine-tuning needs a full pretraining checkpoint")
    base, tok = ckpt.model, ckpt.tokenizer
    _prepare(base, model_kw)

    items = load_manifest(args.manifest)
    train, val, test = (split_items(items, s) for s in ("train", "val", "test"))
    if not train:
        raise InputError("manifest has no train split")
    if args.fraction is not None:
        train = sample_fewshot(train, fraction=args.fraction, seed=tcfg.seed)
    out = _out_dir(args)
    _echo(out, values, tcfg, base.config)
    hash_before = frozen_hash(base)
    log = JsonlLog(out / "metrics.jsonl")
    try:
        if tcfg.vocab_mode == "auto":
            if not val:
                raise ConfigError("--vocab auto chooses on the validation split, which this manifest lacks")
            scores = {}
            for mode in ("topk", "mincount"):
                vocab = _vocab_for(mode, train, tok, tcfg)
                _, _, reps = _train_and_eval(base, tok, vocab, tcfg, train, {"val": val}, log, {"vocab": mode})
                scores[mode] = reps["val"].accuracy
            mode = max(scores, key=lambda m: (scores[m], m == "topk"))
        else:
            mode = tcfg.vocab_mode
        vocab = _vocab_for(mode, train, tok, tcfg)
        evals = {"test": test} if test else {}

        if args.shots is not None:
            rows = []
            for i, task in enumerate(fewshot_tasks(train, args.shots, args.tasks or 1, tcfg.seed)):
                _, _, reps = _train_and_eval(base, tok, vocab, tcfg, task, evals, log, {"task": i})
                rows.append({"task": i, "n_train": len(task), **{s: r.accuracy for s, r in reps.items()}})
            acc = [r.get("test", float("nan")) for r in rows]
            result = {"rows": rows, "mean": float(np.mean(acc)), "std": float(np.std(acc)), "vocab": mode}
            (out / "fewshot.json").write_text(json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
            _print(result)
            return 0

        model, trainer, reps = _train_and_eval(base, tok, vocab, tcfg, train, evals, log)
    finally:
        log.close()
    if frozen_hash(model) != hash_before:
        raise PromptQAError("frozen parameters changed during fine-tuning")
    save_checkpoint(out / "model.ckpt", model, tok, vocab)
    if tcfg.regime == "prompts":
        save_checkpoint(out / "prompts.ckpt", model, prompts_only=True)
    summary = {
        "vocab": mode,
        "vocab_size": len(vocab),
        "n_train": len(train),
        "steps": trainer.step,
        "regime": tcfg.regime,
        **{f"{s}_accuracy": r.accuracy for s, r in reps.items()},
    }
    _print(summary)
    return 0


def cmd_evaluate(args) -> int:
    values = effective_config(args)
    _, tcfg = split_config(values, "evaluate")
    ckpt = load_checkpoint(args.checkpoint)
    model, tok = ckpt.model, ckpt.tokenizer
    if tok is None:
        raise ConfigError(f"{args.checkpoint} carries no tokenizer")
    if args.prompts:
        load_checkpoint(args.prompts, model=model)
    items = load_manifest(args.manifest)
    data = split_items(items, args.split)
    data = [it for it in data if it.question]
    if not data:
        raise InputError(f"split {args.split!r} has no question items")
    if ckpt.answer_vocab is not None and args.vocab is None:
        vocab, mode = AnswerVocab.from_dict(ckpt.answer_vocab), "checkpoint"
    else:
        # zero-shot: vocabulary from training answers, top-k unless asked otherwise
        mode = args.vocab if args.vocab in ("topk", "mincount") else "topk"
        source = split_items(items, "train") or data
        vocab = _vocab_for(mode, source, tok, tcfg)
    cache = FeatureCache(model.config.n_frames)
    rep = evaluate(model_predictor(model, tok, vocab, tcfg.template, cache, max_len=tcfg.max_len), data, vocab)
    _print(
        {
            "accuracy": rep.accuracy,
            "n": rep.n,
            "n_oov": rep.n_oov,
            "vocab_size": len(vocab),
            "vocab": mode,
            "template": tcfg.template,
            "split": args.split,
        }
    )
    return 0


def cmd_gradcheck(args) -> int:
    report = run_suite(tol=args.tol, eps=args.eps, seed=args.seed or 0)
    text = json.dumps(report, indent=2)
    if args.out:
        (_out_dir(args) / "gradcheck.json").write_text(text, encoding="utf-8")
    print(text)
    return 0 if report["passed"] else 4


def cmd_inspect(args) -> int:
    info = describe_checkpoint(args.checkpoint)
    if info.get("model"):
        info["parameter_counts"] = parameter_counts(ModelConfig.from_dict(info["model"]))
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required, help="output directory")


def _arch(p: argparse.ArgumentParser) -> None:
    p.add_argument("--reparam", choices=("on", "off"))
    p.add_argument("--mapper", choices=("vpn", "linear"))
    p.add_argument("--adapters", choices=("on", "off"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a seeded toy video-QA corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-pretrain", type=int, default=128)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-val", type=int, default=0)
    p.add_argument("--n-test", type=int, default=64)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--frames", type=int, default=10, help="sampled frames per clip")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="caption MLM pretraining of all new parameters")
    _common(p)
    _arch(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--regime", choices=("all", "prompts"))
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="masked-answer fine-tuning from a pretraining checkpoint")
    _common(p)
    _arch(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--init", required=True, help="pretraining checkpoint")
    p.add_argument("--regime", choices=("all", "prompts"))
    p.add_argument("--template", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--vocab", choices=("topk", "mincount", "auto"))
    p.add_argument("--fraction", type=float)
    p.add_argument("--shots", type=int)
    p.add_argument("--tasks", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="top-1 accuracy of a checkpoint on one split")
    _common(p, out_required=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", help="prompts-only checkpoint applied on top")
    p.add_argument("--split", default="test")
    p.add_argument("--template", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--vocab", choices=("topk", "mincount"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-checkpoint", help="list checkpoint sections and parameter counts")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PromptQAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
