"""Command line: ``run <config>``, ``list``, ``describe <experiment>``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from ..core import ValidationError
from .config import EXPERIMENTS, ConfigError, config_text, default_config, parse_config
from .criteria import CRITERIA
from .experiments import DESCRIPTIONS, run_experiment

USAGE_ERROR = 2
FAILED = 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="halfplane-ns",
                                 description="Run the registered half-plane flow experiments.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run the experiment described by a config file")
    r.add_argument("config", help="path to the config document")
    r.add_argument("--out", default=None, help="output root (overrides out_dir)")
    r.add_argument("--threads", type=int, default=1,
                   help="worker processes for sweep members (wall-clock only)")
    r.add_argument("--resume", default=None, metavar="PATH",
                   help="run directory or checkpoint to resume from")
    sub.add_parser("list", help="print the experiment ids")
    d = sub.add_parser("describe", help="describe an experiment and print its default config")
    d.add_argument("experiment")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0

    if args.cmd == "list":
        for name in EXPERIMENTS:
            print(name)
        return 0
    if args.cmd == "describe":
        if args.experiment not in EXPERIMENTS:
            print(f"error: unknown experiment {args.experiment!r}; known: {', '.join(EXPERIMENTS)}",
                  file=sys.stderr)
            return USAGE_ERROR
        cfg = default_config(args.experiment)
        print(f"{args.experiment}: {DESCRIPTIONS[args.experiment]}")
        for cid in cfg.verdicts:
            print(f"  verdict {cid}: {CRITERIA[cid]['title']}")
        print()
        print(config_text(cfg), end="")
        return 0

    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return USAGE_ERROR
    path = Path(args.config)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        cfg = parse_config(text)
    except ConfigError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        status, rdir, result = run_experiment(cfg, out=args.out, threads=args.threads,
                                              resume=args.resume,
                                              log=lambda m: print(m, file=sys.stderr))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    for line in result.text:
        print(line)
    for cid, ok in result.verdicts.items():
        print(f"{cid}: {'PASS' if ok else 'FAIL'}")
    for f in result.failures:
        print(f"failure: {f}")
    print(f"artifacts: {rdir}")
    return 0 if status == 0 else FAILED


if __name__ == "__main__":
    sys.exit(main())
