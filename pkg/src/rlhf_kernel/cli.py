"""Command-line entry point: ``rlhf-kernel <subcommand> --config PATH [--seed N] --out DIR``.

Every subcommand writes ``config.json`` (the resolved config), ``metrics.csv`` and
``model.json`` into ``--out``. Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ._validation import InvalidArgumentError, ValidationError
from .dpo import DpoBatch, train_dpo, variant_kwargs
from .environments import read_preferences_jsonl
from .harness import (
    DPO_ALGORITHMS,
    ExperimentConfig,
    build_scorer,
    initial_policy,
    load_config,
    read_corpus_jsonl,
    run_overoptimization,
    run_rlhf,
    simulate_env,
    write_metrics_csv,
)
from .reward_models import FeatureMap, LinearRewardModel, train_bt
from .selection import export_selected, rejection_sampling_round
from .sft import build_mask, flatten, read_sft_jsonl, train_sft, unroll

SUBCOMMANDS = ("train-sft", "train-rm", "train-rl", "train-dpo", "reject-sample", "simulate-env", "overopt")


def _require(config: ExperimentConfig, name: str) -> str:
    value = getattr(config, name)
    if value is None:
        raise ValidationError(f"{name}: required for this subcommand", field=name)
    return value


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train_sft(config: ExperimentConfig, out: Path) -> None:
    examples = []
    for conv, strategy in read_sft_jsonl(_require(config, "sft_path")):
        if strategy == "final_turn_only":
            examples.extend(unroll(conv))
        else:
            examples.append((flatten(conv)[0], build_mask(conv, strategy)))
    policy = initial_policy(config)
    trace = train_sft(policy, examples, config.learning_rate, max(config.epochs, config.steps))
    write_metrics_csv([{"step": i, "loss": v} for i, v in enumerate(trace)], out / "metrics.csv")
    _write_json(out / "model.json", policy.to_dict())


def cmd_train_rm(config: ExperimentConfig, out: Path) -> None:
    records = read_preferences_jsonl(_require(config, "preference_path"))
    spec = dict(config.rm_features or {})
    spec.setdefault("vocab_size", config.vocab_size)
    try:
        fmap = FeatureMap.from_dict(spec)
    except TypeError as exc:
        raise ValidationError(f"rm_features: {exc}", field="rm_features") from exc
    rm, trace = train_bt(LinearRewardModel(fmap), records, config.learning_rate, config.epochs,
                         config.batch_size, config.root_seed().child("rm"))
    write_metrics_csv([{"step": i, "loss": v} for i, v in enumerate(trace)], out / "metrics.csv")
    _write_json(out / "model.json", rm.to_dict())


def cmd_train_rl(config: ExperimentConfig, out: Path) -> None:
    corpus = None
    if config.corpus_path is not None and config.pretrain_gamma > 0:
        corpus = read_corpus_jsonl(config.corpus_path)
    rows, policy = run_rlhf(config, corpus=corpus)
    write_metrics_csv(rows, out / "metrics.csv")
    _write_json(out / "model.json", policy.to_dict())


def cmd_train_dpo(config: ExperimentConfig, out: Path) -> None:
    records = read_preferences_jsonl(_require(config, "preference_path"))
    variant = config.algorithm if config.algorithm in DPO_ALGORITHMS else "dpo"
    policy = initial_policy(config)
    ref = policy.snapshot()
    try:
        batch = DpoBatch(records, config.beta)
    except InvalidArgumentError as exc:
        raise ValidationError(f"preference_path: {exc}", field="preference_path") from exc
    kwargs = variant_kwargs(variant, config.dpo_tau, config.cdpo_eps, config.dpo_alpha)
    trace = train_dpo(policy, ref, batch, config.learning_rate, config.steps, variant, **kwargs)
    columns = ["step", "dpo_loss", "margin", "logp_chosen", "logp_rejected", "implicit_reward_accuracy"]
    write_metrics_csv(trace, out / "metrics.csv", columns)
    _write_json(out / "model.json", policy.to_dict())


def cmd_reject_sample(config: ExperimentConfig, out: Path) -> None:
    policy = initial_policy(config)
    scorer = build_scorer(config)
    prompts = [np.asarray(p, dtype=np.int64) for p in config.prompts]
    tuned, matrix, R, picks, trace = rejection_sampling_round(
        policy, prompts, config.n_samples, scorer, config.root_seed().child("rs"),
        temperature=config.temperature, max_len=config.max_len, epochs=max(config.epochs, 1),
        lr=config.learning_rate, method=config.selection, K=config.top_k, dedup=config.dedup,
    )
    export_selected(out / "selected.jsonl", matrix, R, picks)
    write_metrics_csv([{"step": i, "loss": v} for i, v in enumerate(trace)], out / "metrics.csv")
    _write_json(out / "model.json", tuned.to_dict())


def cmd_simulate_env(config: ExperimentConfig, out: Path) -> None:
    try:
        rows, model = simulate_env(config)
    except (TypeError, InvalidArgumentError) as exc:
        raise ValidationError(f"{config.env}: {exc}", field=config.env) from exc
    write_metrics_csv(rows, out / "metrics.csv")
    _write_json(out / "model.json", model)


def cmd_overopt(config: ExperimentConfig, out: Path) -> None:
    rows, policy, train_rm, test_rm = run_overoptimization(config)
    write_metrics_csv(rows, out / "metrics.csv", ["step", "train_rm", "test_rm", "kl"])
    _write_json(out / "model.json", policy.to_dict())
    _write_json(out / "train_rm.json", train_rm.to_dict())
    _write_json(out / "test_rm.json", test_rm.to_dict())


COMMANDS = {
    "train-sft": cmd_train_sft,
    "train-rm": cmd_train_rm,
    "train-rl": cmd_train_rl,
    "train-dpo": cmd_train_dpo,
    "reject-sample": cmd_reject_sample,
    "simulate-env": cmd_simulate_env,
    "overopt": cmd_overopt,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlhf-kernel", description="Desk-scale RLHF experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", required=True, metavar="PATH", help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, metavar="N", help="override the config seed")
        p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    out = Path(args.out)
    try:
        config = load_config(args.config, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", config.to_dict())
        COMMANDS[args.command](config, out)
    except ValidationError as exc:
        field = exc.field or "config"
        print(f"rlhf-kernel: invalid {field}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
