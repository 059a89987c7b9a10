"""Command-line entry point: ``run``, ``verify`` and ``sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from .config import ConfigError, load_config
from .runner import EXIT_OK, EXIT_RUN_FAILED, EXIT_USAGE, run, sweep
from .verify import SUITES, format_table, verify


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sacbp", description="Belief-space receding-horizon control experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log planner warnings and progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run an experiment from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=None, help="parallel seed processes (default: config, SACBP_WORKERS, 1)")
    p.add_argument("--out", default=None, help="output directory (default: config output)")

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("--suite", required=True, help=f"one of {', '.join(sorted(SUITES))}")

    p = sub.add_parser("sweep", help="run an experiment for several values of one config entry")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, help="dotted path, e.g. planner.params.eps")
    p.add_argument("--values", required=True, help="comma-separated values, parsed as YAML scalars")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)
    return parser


def parse_values(text: str) -> list:
    values = [yaml.safe_load(tok) for tok in text.split(",") if tok.strip()]
    if not values:
        raise ConfigError("--values is empty")
    return values


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            if args.suite not in SUITES:
                print(f"unknown suite {args.suite!r}; choose from {', '.join(sorted(SUITES))}", file=sys.stderr)
                return EXIT_USAGE
            checks = verify(args.suite)
            sys.stdout.write(format_table(checks))
            return EXIT_OK if all(c.passed for c in checks) else EXIT_RUN_FAILED
        cfg = load_config(args.config)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.command == "run":
            res = run(cfg, workers=args.workers, out=args.out)
            print(json.dumps(res.summary["aggregate"], indent=2, sort_keys=True))
            return res.exit_code
        results = sweep(cfg, args.param, parse_values(args.values), workers=args.workers, out=args.out)
        for value, res in results:
            print(f"{args.param}={value}: exit {res.exit_code}")
        return EXIT_RUN_FAILED if any(r.exit_code != EXIT_OK for _, r in results) else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
