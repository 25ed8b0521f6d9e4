"""Command-line entry point: ``tsmemory <subcommand> [--config F] [--seed N] [--out DIR] [--threads N]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import config as cfgmod
from .pipeline import PipelineError, open_run, run_pipeline, run_stages

SUBCOMMANDS = {
    "gen-data": ["data"],
    "build-teacher": ["teacher"],
    "train": ["train"],
    "tune-alpha": ["tune-alpha"],
    "evaluate": ["evaluate"],
    "bench-latency": ["bench"],
    "run-all": None,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML pipeline config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="master seed for data, init and shuffling")
    common.add_argument("--out", help="run directory")
    common.add_argument("--threads", type=int, help="worker threads for teacher and cache construction")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="tsmemory", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "run-all":
            sp.add_argument("--skip-bench", action="store_true", help="do not run the latency benchmark")
    sub.add_parser("write-config", parents=[common], help="write the effective config and exit")
    return p


def resolve_config(args) -> cfgmod.PipelineConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.threads:
        cfg = replace(cfg, threads=args.threads)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = resolve_config(args)
    try:
        if args.command == "write-config":
            print(cfgmod.dumps(cfg), end="")
            return 0
        if args.command == "run-all":
            run = run_pipeline(cfg, bench=False if args.skip_bench else None)
        else:
            run = run_stages(open_run(cfg), SUBCOMMANDS[args.command])
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for line in run.notes:
        print(line)
    print(f"artifacts in {run.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
