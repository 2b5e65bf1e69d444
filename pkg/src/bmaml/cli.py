"""Command line: ``bmaml {train,rl-train,eval,active}``.

Exit codes: 0 success, 2 invalid configuration, 3 numeric divergence,
4 checkpoint checksum failure (5 for other unreadable checkpoints).
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

from . import checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import TrainingDiverged, active_histories, eval_summary, train, write_active_csv, write_json

EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKSUM, EXIT_CHECKPOINT = 2, 3, 4, 5


def _threads():
    """Cap BLAS worker threads from BMAML_THREADS."""
    value = os.environ.get("BMAML_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bmaml", description="Bayesian MAML experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "rl-train", "eval", "active"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment JSON file")
        s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (dotted keys for sections); repeatable")
        s.add_argument("--out", help="output directory (train) or output file (eval, active)")
        s.add_argument("--quiet", action="store_true")
        if name in ("eval", "active"):
            s.add_argument("--checkpoint", required=True)
    return p


def _config(args, checkpoint_path: str | None = None) -> ExperimentConfig:
    path = args.config
    if path is None and checkpoint_path is not None:
        candidate = Path(checkpoint_path).with_name("config.json")
        path = str(candidate) if candidate.exists() else None
    return load_config(path, args.override)


def _load_checkpoint(path: str):
    try:
        return checkpoint.load(path)
    except OSError as err:
        raise checkpoint.CheckpointError(str(err)) from err


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.command == "rl-train" and not cfg.is_rl:
        raise ConfigError(f"suite: rl-train needs suite nav2d, got {cfg.suite!r}")
    out = Path(args.out or cfg.output_dir)
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    try:
        train(cfg, out, log)
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args, args.checkpoint)
    theta = _load_checkpoint(args.checkpoint)
    summary = eval_summary(cfg, theta, cfg.eval_tasks, cfg.seed)
    summary["checkpoint"] = str(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.json")
    write_json(out, summary)
    if not args.quiet:
        print(f"{summary['metric']} mean {summary['mean']:.6g} std {summary['std']:.6g} over {summary['eval_tasks']} tasks")
    return 0


def cmd_active(args) -> int:
    cfg = _config(args, args.checkpoint)
    if cfg.suite not in ("active", "synth-class"):
        raise ConfigError(f"suite: active learning needs a classification suite, got {cfg.suite!r}")
    theta = _load_checkpoint(args.checkpoint)
    hist = active_histories(cfg, theta)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("active.csv")
    write_active_csv(out, hist)
    if not args.quiet:
        print(f"final accuracy entropy {hist['entropy'][:, -1].mean():.4f} random {hist['random'][:, -1].mean():.4f}")
    return 0


COMMANDS = {"train": cmd_train, "rl-train": cmd_train, "eval": cmd_eval, "active": cmd_active}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        with _threads():
            return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except checkpoint.CheckpointError as err:
        print(f"error: checkpoint: {err}", file=sys.stderr)
        return EXIT_CHECKSUM if isinstance(err, checkpoint.ChecksumError) else EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
