"""Command-line entry point.

Every subcommand takes the same core flags (--config, --seed, --out, --jobs)
and delegates to the harness; outputs are files under --out plus a one-line
JSON summary on stdout. Any invariant violation or bad input exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import (ExperimentConfig, cmd_attack, cmd_avg, cmd_detect,
                      cmd_eval, cmd_generate, cmd_inject, default_config)

_U64_MAX = (1 << 64) - 1


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value <= _U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit int")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqmark",
        description="Toy-scale watermarking lab for vector-quantized "
                    "autoregressive image generation.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "generate": "emit watermarked images, controls, and ground-truth sidecars",
        "attack": "apply the configured attack list to a corpus",
        "detect": "verify an image or a corpus against the configured scheme",
        "eval": "run the full scheme x attack matrix and aggregate",
        "avg": "average a corpus and verify the mean (steganalysis)",
        "inject": "spectral lattice forgery over synthesized covers",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH",
                       help="experiment config JSON (default: built-in toy config)")
        p.add_argument("--seed", type=_u64, default=0, metavar="U64",
                       help="run seed (default 0)")
        p.add_argument("--out", default=None, metavar="DIR",
                       help="output directory (default out-<command>)")
        p.add_argument("--jobs", type=int, default=1, metavar="N",
                       help="parallel worker processes (default 1)")
        if name == "detect":
            p.add_argument("--image", metavar="PATH",
                           help="single image to verify instead of a corpus")
            p.add_argument("--sidecar", metavar="PATH",
                           help="ground-truth sidecar for the cross-check "
                                "(default: image path with .json suffix)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            config = ExperimentConfig.load(args.config)
        else:
            config = default_config("kgw")
        out = args.out or f"out-{args.command}"
        if args.jobs < 1:
            raise ValueError("--jobs must be >= 1")
        if args.command == "generate":
            doc = cmd_generate(config, args.seed, out, jobs=args.jobs)
            brief = {"items": len(doc["items"]), "out": out}
        elif args.command == "attack":
            doc = cmd_attack(config, args.seed, out, jobs=args.jobs)
            brief = {"items": len(doc["items"]), "out": out}
        elif args.command == "detect":
            doc = cmd_detect(config, args.seed, out, image=args.image,
                             sidecar=args.sidecar)
            brief = {k: doc[k] for k in ("p", "z") if k in doc}
            brief["out"] = out
        elif args.command == "eval":
            doc = cmd_eval(config, args.seed, out, jobs=args.jobs)
            brief = {"computed": doc["computed"], "out": out}
        elif args.command == "avg":
            doc = cmd_avg(config, args.seed, out)
            brief = {"p": doc["mean"]["p"], "out": out}
        else:
            doc = cmd_inject(config, args.seed, out)
            brief = {"covers": doc["count"], "skipped_bins": doc["skipped_bins"],
                     "out": out}
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **brief}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
