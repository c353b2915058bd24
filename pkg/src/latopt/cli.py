"""Command line entry point: ``latopt macro|micro|run|assemble --config <path> --out <dir>``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .exceptions import ConfigError, LatoptError, StageError
from .pipeline import assemble_stage, macro_stage, micro_stage, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latopt", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, text in [("macro", "free material optimization and clustering"),
                       ("micro", "cell design for every cluster (needs macro artifacts)"),
                       ("assemble", "tile designed cells into the macro layout"),
                       ("run", "all stages")]:
        s = sub.add_parser(verb, help=text)
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--threads", type=int, default=None, help="worker processes for cell design")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.verb == "macro":
            macro_stage(cfg, args.out)
        elif args.verb == "micro":
            micro_stage(cfg, args.out, args.threads)
        elif args.verb == "assemble":
            assemble_stage(cfg, args.out)
        else:
            run_pipeline(cfg, args.out, args.threads)
    except FileNotFoundError as exc:
        print(f"missing input artifact: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, LatoptError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
