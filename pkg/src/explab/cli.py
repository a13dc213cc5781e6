"""Command-line entry point.

    explab <command> [--config FILE] [--set key.path=value ...]

Commands: oracle, train, finetune, eval, sweep-labels, ablation, frontier.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

import argparse
import json
import sys

from .augment import AugmentError
from .contrastive import ContrastiveError
from .data import DataError
from .experiments import (
    ConfigError,
    RuntimeFailure,
    cmd_ablation,
    cmd_eval,
    cmd_finetune,
    cmd_frontier,
    cmd_oracle,
    cmd_sweep_labels,
    cmd_train,
    load_config_file,
    resolve_config,
)
from .heads import HeadError
from .metrics import MetricError
from .net import NetError
from .oracle import OracleError

COMMANDS = {
    "oracle": cmd_oracle,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep-labels": cmd_sweep_labels,
    "ablation": cmd_ablation,
    "frontier": cmd_frontier,
}

CONFIG_ERRORS = (ConfigError, DataError, OracleError, AugmentError, ContrastiveError, HeadError, NetError, MetricError)


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings stay strings
    return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="explab",
        description="Real-time explainer laboratory: oracles, contrastive pretraining, "
        "label-efficiency and throughput studies.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. --set seed=3 --set contrastive.tau=0.05",
    )
    parser.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    parser.add_argument("--output-dir", help="shortcut for --set output_dir=DIR")
    parser.add_argument("--name", help="shortcut for --set name=NAME")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        user = load_config_file(args.config) if args.config else {}
        overrides = dict(_parse_override(text) for text in args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.output_dir is not None:
            overrides["output_dir"] = args.output_dir
        if args.name is not None:
            overrides["name"] = args.name
        config = resolve_config(user, overrides)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        out = COMMANDS[args.command](config)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeFailure, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    if out is not None:
        print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
