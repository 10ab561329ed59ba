"""popcal command line: run pipeline stages from a TOML config, scan a corpus
directly, generate the synthetic benchmark, or re-emit reports for a run.

Exit codes: 0 success, 2 config error, 3 dependency error, 4 upstream-service
error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .corpus import EntityCatalog, build_matcher, scan_corpus
from .gateway import CacheMissError, CapabilityError, TransportError
from .pipeline import (
    ConfigError,
    DependencyError,
    PipelineConfig,
    STAGES,
    run_stage,
)
from .sitelinks import FetchError, ResolverUnavailableError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_UPSTREAM = 4

UPSTREAM_ERRORS = (
    TransportError,
    CapabilityError,
    CacheMissError,
    FetchError,
    ResolverUnavailableError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="popcal",
        description="knowledge-popularity measurement and confidence calibration toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        if stage == "scan":
            continue  # scan gets a richer parser below
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        if stage == "report":
            p.add_argument("--config", type=Path, help="pipeline TOML config")
            p.add_argument("--run", type=Path, help="existing run directory")
        else:
            p.add_argument("--config", type=Path, required=True, help="pipeline TOML config")
        p.add_argument("--force", action="store_true", help="ignore the stage cache")

    scan = sub.add_parser("scan", help="scan a corpus into an occurrence index")
    scan.add_argument("--config", type=Path, help="pipeline TOML config")
    scan.add_argument("--corpus", type=Path, help="corpus JSONL file or shard directory")
    scan.add_argument("--catalog", type=Path, help="entity catalog JSONL")
    scan.add_argument("--out", type=Path, help="output index path")
    scan.add_argument("--workers", type=int, default=1)
    scan.add_argument("--case-insensitive", action="store_true")
    scan.add_argument("--force", action="store_true", help="ignore the stage cache")

    synth = sub.add_parser("synth", help="generate the synthetic benchmark dataset")
    synth.add_argument("--config", type=Path, required=True)
    synth.add_argument("--force", action="store_true")
    return parser


def _scan_direct(args: argparse.Namespace) -> int:
    for name in ("corpus", "catalog", "out"):
        if getattr(args, name) is None:
            raise ConfigError(f"scan without --config requires --{name}")
    if not args.corpus.exists():
        raise ConfigError(f"corpus path does not exist: {args.corpus}")
    if not args.catalog.exists():
        raise ConfigError(f"catalog path does not exist: {args.catalog}")
    catalog = EntityCatalog.load_jsonl(args.catalog)
    matcher = build_matcher(catalog, case_insensitive=args.case_insensitive)
    index = scan_corpus(args.corpus, matcher, workers=args.workers)
    index.save(args.out)
    print(f"indexed {index.doc_count_total} documents, {len(index.postings)} entities -> {args.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "scan" and args.config is None:
            return _scan_direct(args)
        if args.command == "report" and args.config is None:
            if args.run is None:
                raise ConfigError("report needs --config or --run")
            config = PipelineConfig.from_run_dir(args.run)
        else:
            if args.config is None:
                raise ConfigError(f"{args.command} needs --config")
            config = PipelineConfig.load(args.config)
        outputs = run_stage(config, args.command, force=args.force)
        for path in outputs:
            print(path)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except UPSTREAM_ERRORS as exc:
        print(f"upstream service error: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM


if __name__ == "__main__":
    sys.exit(main())
