"""Command-line entry point: ``vlmreward {train,eval-pr,prompt-compare,gen-dataset}``.

Exit codes: 0 success, 2 usage or validation error, 3 environment, I/O or
transport error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import agent, evaluation, records
from .config import RunConfig, build_provider, build_reward_model, load_config
from .errors import (
    ConfigError,
    DatasetError,
    InvalidInput,
    ProtocolError,
    ServiceError,
    TrainingError,
    TransportError,
)

log = logging.getLogger("vlmreward")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ENV = 3


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    return cfg


def _run_dir(args, cfg: RunConfig, kind: str) -> Path:
    name = f"{kind}-{cfg.digest()}"
    if args.timestamp:
        name += time.strftime("-%Y%m%d-%H%M%S")
    path = Path(args.out) / name
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create run directory {path}: {exc}", EXIT_ENV) from None
    return path


def _dataset(cfg: RunConfig, path: str | None):
    path = path or cfg.eval.dataset
    if path is None:
        return evaluation.generate_dataset(
            cfg.env, cfg.goals(), cfg.eval.dataset_size, cfg.eval.dataset_seed, cfg.eval.expert_prob
        )
    try:
        return evaluation.read_dataset(path)
    except OSError as exc:
        raise CLIError(f"cannot read dataset {path}: {exc}", EXIT_ENV) from None


def cmd_train(args) -> int:
    cfg = _load(args)
    goals = cfg.goals()
    provider = build_provider(cfg, goals)
    model = build_reward_model(cfg, provider, goals)
    reward_fn = agent.oracle_reward_fn if args.oracle else agent.vlm_reward_fn(model)
    result = agent.run_training(cfg.env, cfg.agent, goals, reward_fn, keep_trajectories=True)
    run = _run_dir(args, cfg, "train")
    result.log.write_csv(run / "training_log.csv")
    records.write_trajectories(result.trajectories, run / "trajectories.jsonl")
    (run / "policy.json").write_text(json.dumps(result.policy.to_json()) + "\n")
    summary = {
        "config_digest": cfg.digest(),
        "iterations": len(result.log),
        "aborted_episodes": result.log.aborted_episodes,
        "train_goals": [g.goal_id for g in result.train_goals],
        "holdout_goals": [g.goal_id for g in result.holdout_goals],
        "final_holdout_return": result.final_holdout_return,
    }
    if len(result.log) >= 3:
        try:
            summary["intrinsic_gt_correlation"] = evaluation.correlation(result.log)
        except evaluation.UndefinedCorrelation:
            summary["intrinsic_gt_correlation"] = None
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(run)
    return EXIT_OK


def cmd_eval_pr(args) -> int:
    cfg = _load(args)
    data = _dataset(cfg, args.dataset)
    model = build_reward_model(cfg)
    try:
        curve = evaluation.pr_curve(evaluation.score_dataset(data, model), cfg.eval.threshold_grid())
    except InvalidInput as exc:
        raise CLIError(str(exc), EXIT_USAGE) from None
    run = _run_dir(args, cfg, "eval-pr")
    evaluation.write_pr_csv(curve, run / "pr_curve.csv")
    if curve.undefined:
        print(f"{len(curve.undefined)} thresholds had no predicted positives and were omitted", file=sys.stderr)
    if args.svg:
        evaluation.plot_pr_curves([curve], [cfg.embedding.kind], run / "pr_curve.svg")
    print(f"AUC {curve.auc():.6f}", file=sys.stderr)
    print(run)
    return EXIT_OK


def cmd_prompt_compare(args) -> int:
    cfg = _load(args)
    ids = [t for chunk in args.templates for t in chunk.split(",") if t]
    unique = list(dict.fromkeys(ids))
    if len(unique) < len(ids):
        log.warning("duplicate template ids dropped: %s", ", ".join(ids))
    if len(unique) < 2:
        raise CLIError("prompt-compare needs at least two distinct template ids", EXIT_USAGE)
    registry = cfg.registry()
    for t in unique:
        if t not in registry:
            raise CLIError(f"unknown template id {t!r}", EXIT_USAGE)
    data = _dataset(cfg, args.dataset)
    rows = evaluation.prompt_compare(unique, cfg, data, train=args.train)
    run = _run_dir(args, cfg, "prompt-compare")
    evaluation.write_compare_csv(rows, run / "prompt_compare.csv")
    print(run)
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    cfg = _load(args)
    if args.size < 2:
        raise CLIError("--size must be >= 2", EXIT_USAGE)
    data = evaluation.generate_dataset(
        cfg.env, cfg.goals(), args.size, cfg.eval.dataset_seed, cfg.eval.expert_prob
    )
    try:
        evaluation.write_dataset(data, args.output)
    except OSError as exc:
        raise CLIError(f"cannot write {args.output}: {exc}", EXIT_ENV) from None
    print(args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlmreward", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", required=True, help="TOML or JSON run config")
        p.add_argument("--seed-override", type=int, default=None, help="replace every seed in the config")
        if out:
            p.add_argument("--out", default="runs", help="parent directory for run outputs")
            p.add_argument("--timestamp", action="store_true", help="suffix the run directory with a timestamp")

    p = sub.add_parser("train", help="train an agent on the intrinsic reward")
    common(p)
    p.add_argument("--oracle", action="store_true", help="diagnostic: train on the ground-truth reward")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-pr", help="precision-recall curve of the reward model on a dataset")
    common(p)
    p.add_argument("--dataset", default=None, help="JSONL dataset (default: eval.dataset or generated)")
    p.add_argument("--svg", action="store_true", help="also write pr_curve.svg")
    p.set_defaults(func=cmd_eval_pr)

    p = sub.add_parser("prompt-compare", help="compare prompt templates")
    common(p)
    p.add_argument("templates", nargs="+", help="template ids, space or comma separated")
    p.add_argument("--dataset", default=None)
    p.add_argument("--train", action="store_true", help="also train one agent per template")
    p.set_defaults(func=cmd_prompt_compare)

    p = sub.add_parser("gen-dataset", help="generate a balanced labeled dataset")
    common(p, out=False)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_gen_dataset)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, ServiceError, ProtocolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except (InvalidInput, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
