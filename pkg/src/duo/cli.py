"""Command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 missing or corrupt
upstream artifact, 3 numeric failure (divergence, non-convergence, no valid
pairs).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .pairgen import PairGenerationError
from .pipeline import STAGES, DependencyError, LockError, run_stage
from .prefopt import ConvergenceError

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_OUT = "runs"

log = logging.getLogger("duo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults are embedded)")
    common.add_argument("--seed", type=int, help="global seed; also replaces every section seed")
    common.add_argument("--out", help=f"output directory (default: ${cfgmod.ENV_OUT} or ./{DEFAULT_OUT})")
    common.add_argument("--stage-overrides", nargs="*", default=[], metavar="KEY=VALUE",
                        help="dotted config overrides, e.g. unlearn.beta=12.5")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="duo", description="Toy-world unlearning experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in [*STAGES, "print-config"]:
        sub.add_parser(name, parents=[common])
    return p


def resolve_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config)
    overrides = list(args.stage_overrides or [])
    if args.seed is not None:
        overrides = [f"seed={args.seed}", *(f"{s}.seed={args.seed}" for s in ("base_train", "unlearn")),
                     *overrides]
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
    return cfg


def resolve_out(args, cfg: cfgmod.ExperimentConfig) -> Path:
    return Path(args.out or cfg.out or os.environ.get(cfgmod.ENV_OUT) or DEFAULT_OUT)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"duo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "print-config":
            sys.stdout.write(cfg.dump())
            return EXIT_OK
        out = resolve_out(args, cfg)
        arts = run_stage(args.command, cfg, out)
    except (cfgmod.ConfigError, FileNotFoundError, LockError) as exc:
        print(f"duo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as exc:
        print(f"duo: dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (FloatingPointError, ConvergenceError, PairGenerationError) as exc:
        print(f"duo: numeric failure in {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for name, path in sorted(arts.items()):
        print(f"{name}\t{path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
