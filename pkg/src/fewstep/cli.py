"""``fewstep`` command line: thin argparse layer over :mod:`fewstep.runner`."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import TASKS, ConfigError, config_from_dict, validate
from .runner import run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewstep", description="Few-step flow-model distillation lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="task", required=True, metavar="TASK")
    helps = {
        "train-teacher": "train the flow-matching teacher",
        "distill-cm": "consistency-distill the teacher",
        "distill-dmd": "distribution-matching finetune of the CM student",
        "sample": "draw samples from a checkpoint",
        "eval": "speedup / fidelity / score / conditioning reports",
        "pack-demo": "pack, dump and reload a unified sequence",
    }
    for task in TASKS:
        p = sub.add_parser(task, help=helps[task])
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides config)")
        if task == "sample":
            p.add_argument("--steps", type=int, help="sampling steps (= NFE)")
            p.add_argument("--n", type=int, help="number of samples")
            p.add_argument("--sampler", choices=("consistency", "euler"))
            p.add_argument("--checkpoint", help="sample from this checkpoint instead of the newest in --out")
        if task == "eval":
            for flag in ("speedup", "fidelity", "score-check", "conditioning"):
                p.add_argument(f"--{flag}", action="store_true")
    return parser


def load_config(args: argparse.Namespace):
    raw: dict = {}
    if args.config:
        with open(args.config) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"malformed config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    raw["task"] = args.task
    cfg = config_from_dict(raw)
    if args.task == "sample":
        for name in ("steps", "n", "sampler", "checkpoint"):
            value = getattr(args, name)
            if value is not None:
                setattr(cfg.sample, name, value)
        validate(cfg)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        options = {}
        if args.task == "eval":
            options = {"speedup": args.speedup, "fidelity": args.fidelity,
                       "score_check": args.score_check, "conditioning": args.conditioning}
        result = run(cfg, **options)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"fewstep {args.task}: error: {exc}", file=sys.stderr)
        return 1
    if args.task == "eval" and "speedup" in result:
        print((Path(cfg.out) / "speedup.txt").read_text(), end="")
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
