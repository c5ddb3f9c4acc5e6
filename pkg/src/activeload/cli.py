"""Command-line entry point: ``activeload {generate,run,grid,replay}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .errors import ConfigError

COMMANDS = {
    "generate": harness.cmd_generate,
    "run": harness.cmd_run,
    "grid": harness.cmd_grid,
    "replay": harness.cmd_replay,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="activeload", description="Batch active learning experiments for load prediction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    return parser


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "message": " ".join(str(exc).split())}
    key = getattr(exc, "key", None)
    if key is not None:
        payload["key"] = key
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _fail(exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config, args.command, args.seed)
        result = COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        return _fail(exc, 2)
    except (ValueError, ArithmeticError, OSError) as exc:
        return _fail(exc, 1)
    if args.command == "generate":
        print(json.dumps(result))
    elif args.command == "replay":
        print(json.dumps(result))
    else:
        print(json.dumps({"out": args.out, "rows": len(result) if isinstance(result, list) else 1}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
