"""Command-line entry point: ``bflsim <command> [--config F] [--seed N] [--out DIR] [--realizations N]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .experiments import SWEEPS, execute, replay

COMMANDS = ("robustness", "consensus", "sweep", "train")


def _common(p):
    p.add_argument("--config", type=Path, default=None, help="YAML scenario file (defaults if omitted)")
    p.add_argument("--seed", type=int, default=None, help="root seed, overrides the config")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--realizations", type=int, default=None,
                   help="episodes per sweep point; repeats for robustness")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bflsim", description="B-FL edge network simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "sweep":
            p.add_argument("--sweep", choices=SWEEPS, action="append", dest="sweeps",
                           help="sweep to run (repeatable; all when omitted)")
    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, default=None, help="defaults to <manifest dir>/replay")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        out = args.out or args.manifest.parent / "replay"
        result = replay(args.manifest, out)
        for name, ok in result.items():
            print(f"{'match' if ok else 'MISMATCH'} {name}")
        return 0 if all(result.values()) else 1
    overrides = {"seed": args.seed}
    if args.realizations is not None:
        if args.realizations < 1:
            print("error: --realizations must be >= 1", file=sys.stderr)
            return 2
        overrides["realizations"] = args.realizations
    try:
        config = load_config(args.config, **overrides)
        if args.command == "robustness" and args.realizations is not None:
            config = config.model_copy(update={"learning": config.learning.model_copy(
                update={"repeats": args.realizations})})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    written = execute(args.command, config, args.out, {"sweeps": args.sweeps} if args.command == "sweep" else None)
    for name in written:
        print(args.out / name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
