"""Command-line entry point: ``run``, ``emit-csv``, ``verify``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import PRESETS, ConfigError, load_config
from .report import emit_csv, verify
from .runner import run


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safetransfer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="pre-train and transfer for every configured job")
    r.add_argument("--config", help="JSON config; omitted fields take defaults")
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--seeds", type=_seeds, help="comma-separated, e.g. 0,1,2")
    r.add_argument("--out", default="runs_out")
    r.add_argument("--workers", type=int, help="overrides SAFETRANSFER_WORKERS")

    e = sub.add_parser("emit-csv", help="write iterations.csv per run and summary.csv")
    e.add_argument("--run", required=True)

    v = sub.add_parser("verify", help="audit the damage constraint")
    v.add_argument("--run", required=True)
    v.add_argument("--d-safe", type=float, help="budget to audit against (default: the one each run used)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config, preset=args.preset, seeds=args.seeds)
            out = run(cfg, args.out, workers=args.workers)
            for path in emit_csv(out):
                print(path)
            return 0
        if args.command == "emit-csv":
            for path in emit_csv(args.run):
                print(path)
            return 0
        audit = verify(args.run, args.d_safe)
        print("\n".join(audit.lines()))
        return 0 if audit.ok else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
