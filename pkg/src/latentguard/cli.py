"""Command-line entry point: ``latentguard <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigKeyError, RunConfig
from .nets import CheckpointError

COMMANDS = ("dataset", "train", "attack", "defend", "swap", "eval", "report", "transfer", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentguard", description=__doc__)
    p.add_argument("--config", metavar="PATH", help="flat 'key = value' config file")
    p.add_argument("--out", metavar="DIR", default="run", help="output directory (default: run)")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--threads", type=int, help="override threads (BLAS thread limit)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "train":
            sp.add_argument("--stage", required=True, choices=pipeline.STAGES)
            sp.add_argument("--bundle", default="a", choices=("a", "b"),
                            help="b trains the transfer bundle under transfer.arch_seed")
        if name == "pipeline":
            sp.add_argument("--no-transfer", action="store_true", help="skip bundle B and the transfer report")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["master_seed"] = str(args.seed)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    return RunConfig.resolve(args.config, overrides, args.out)


def run(args: argparse.Namespace, cfg: RunConfig):
    if args.command == "train":
        return pipeline.cmd_train(cfg, args.stage, args.bundle)
    if args.command == "pipeline":
        return pipeline.run_pipeline(cfg, transfer=not args.no_transfer)
    return getattr(pipeline, f"cmd_{args.command}")(cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        with threadpool_limits(limits=cfg["threads"]):
            out = run(args, cfg)
    except ConfigKeyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except pipeline.PrerequisiteError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (pipeline.TransferConfigError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if out is not None:
        print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
