"""Command-line front end. Thin: argument parsing and exit codes only; all
work happens in :mod:`matchcube.pipelines`.

Subcommands: match, balance, ate, prepare, query.
Exit codes: 0 success, 2 configuration/validation problems, 1 runtime errors.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import load_config
from .errors import ConfigError, MatchcubeError
from . import pipelines


def _add_common(parser: argparse.ArgumentParser, *, config: bool = True) -> None:
    if config:
        parser.add_argument("--config", required=True, help="analysis config (TOML)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--threads",
        type=int,
        default=os.cpu_count() or 1,
        help="worker threads for parallel sections (default: all cores)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchcube",
        description="Causal matching pipelines over CSV data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="run ingestion through matching")
    _add_common(p)

    p = sub.add_parser("balance", help="before/after imbalance report")
    _add_common(p)
    p.add_argument("--matched", required=True, help="matched.csv from a match run")

    p = sub.add_parser("ate", help="average treatment effect")
    _add_common(p)
    p.add_argument("--matched", required=True, help="matched.csv from a match run")
    p.add_argument(
        "--normalized",
        action="store_true",
        help="multiply by the treated share of matched units",
    )

    p = sub.add_parser("prepare", help="offline store preparation")
    _add_common(p)

    p = sub.add_parser("query", help="subpopulation query against a prepared store")
    _add_common(p, config=False)
    p.add_argument("--store", required=True, help="prepared store directory")
    p.add_argument("--treatment", required=True)
    p.add_argument("--predicate", default=None, help='e.g. \'airport = "SFO"\'')

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "match":
            cfg = load_config(args.config)
            result = pipelines.run_match(cfg, args.out, threads=args.threads)
            treated, control = result.counts()
            print(
                f"{result.method}: {result.n_rows} matched rows "
                f"({treated} treated, {control} control) -> {args.out}"
            )
        elif args.command == "balance":
            cfg = load_config(args.config)
            result = pipelines.run_balance(cfg, args.matched, args.out)
            print(result.report.to_text(), end="")
        elif args.command == "ate":
            cfg = load_config(args.config)
            result = pipelines.run_ate(
                cfg, args.matched, args.out, normalized=args.normalized
            )
            print(f"ate {result.value!r}")
        elif args.command == "prepare":
            cfg = load_config(args.config)
            result = pipelines.run_prepare(cfg, args.out, threads=args.threads)
            print(
                f"prepared {len(result.store.groups)} group(s), "
                f"objective {result.objective:.6g} -> {result.store_dir}"
            )
        else:
            result = pipelines.run_query(
                args.store, args.treatment, args.predicate, args.out
            )
            s = result.subclassified
            treated, control = s.counts()
            print(
                f"query: {s.n_rows} rows ({treated} treated, {control} control), "
                f"{s.n_subclasses()} subclasses -> {args.out}"
            )
    except ConfigError as err:
        for problem in err.errors:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except MatchcubeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
