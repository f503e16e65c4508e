"""Command-line front end.

Progress and errors go to standard error only; narrative content is never
printed to the terminal. All data artifacts are written to files.

    crashdeid run  --input corpus.jsonl --out outdir --preset hybrid_ev ...
    crashdeid run  --replay outdir/manifest.json --out newdir
    crashdeid eval --input corpus.jsonl --gold corpus.gold.jsonl \\
                   --report report.json --preset rules_only ...
"""

from __future__ import annotations

import argparse
import sys

from .extract import EnsembleConfig
from .gateway import BackendConfig
from .pipeline import (
    ConfigError,
    PipelineConfig,
    replay_manifest,
    run_eval,
    run_pipeline,
)
from .redact import RedactionStyle
from .verify import VerifierPolicy


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", help="narratives file (JSONL or CSV)")
    parser.add_argument("--format", choices=["jsonl", "csv"], default=None)
    parser.add_argument("--gold", help="gold annotations JSONL sidecar")
    parser.add_argument(
        "--preset",
        choices=["rules_only", "llm_single", "hybrid", "hybrid_ev"],
        default="hybrid_ev",
    )
    parser.add_argument("--k-ensemble", type=int, default=5)
    parser.add_argument(
        "--policy",
        choices=["recall-first", "precision-first"],
        default="recall-first",
    )
    parser.add_argument("--extractor-endpoint", help="chat-completions URL")
    parser.add_argument("--verifier-endpoint", help="chat-completions URL")
    parser.add_argument("--extractor-model", default=None)
    parser.add_argument("--verifier-model", default=None)
    parser.add_argument(
        "--mock-fixtures",
        help="scripted-mock fixture JSONL; used for any backend without an endpoint",
    )
    parser.add_argument("--parallelism", type=int, default=1)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument(
        "--redaction", choices=["tagged", "placeholder"], default="tagged"
    )
    parser.add_argument(
        "--mask-timestamps",
        action="store_true",
        help="write fixed timestamps for byte-reproducible outputs",
    )


def _backend(endpoint: str | None, model: str | None, fixtures: str | None):
    if endpoint:
        return BackendConfig(
            kind="http_endpoint", endpoint_url=endpoint, model_name=model
        )
    if fixtures:
        return BackendConfig(kind="scripted_mock", fixture_path=fixtures)
    return None


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    return PipelineConfig(
        preset=args.preset,
        ensemble=EnsembleConfig(k_runs=args.k_ensemble),
        policy=(
            VerifierPolicy.recall_first()
            if args.policy == "recall-first"
            else VerifierPolicy.precision_first()
        ),
        extractor_backend=_backend(
            args.extractor_endpoint, args.extractor_model, args.mock_fixtures
        ),
        verifier_backend=_backend(
            args.verifier_endpoint, args.verifier_model, args.mock_fixtures
        ),
        output_style=RedactionStyle(mode=args.redaction),
        parallelism=args.parallelism,
        seed=args.seed,
        mask_timestamps=args.mask_timestamps,
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="crashdeid")
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="de-identify a corpus")
    _add_common_flags(run_parser)
    run_parser.add_argument("--out", required=True, help="output directory")
    run_parser.add_argument("--replay", help="re-run a recorded manifest")

    eval_parser = sub.add_parser("eval", help="run and score against gold")
    _add_common_flags(eval_parser)
    eval_parser.add_argument("--report", required=True, help="report JSON path")
    eval_parser.add_argument("--out", help="also write pipeline outputs here")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            if args.replay:
                summary = replay_manifest(args.replay, args.out)
            else:
                if not args.input:
                    parser.error("run requires --input (or --replay)")
                summary = run_pipeline(
                    _config_from_args(args),
                    args.input,
                    args.out,
                    fmt=args.format,
                    gold_path=args.gold,
                )
            print(
                f"processed {summary.processed}/{summary.narratives} narratives "
                f"-> {summary.output_dir}",
                file=sys.stderr,
            )
            if summary.failed_narratives:
                print(
                    "unprocessed narratives: "
                    + ", ".join(summary.failed_narratives),
                    file=sys.stderr,
                )
                return 1
            return 0
        if not args.input:
            parser.error("eval requires --input")
        if not args.gold:
            parser.error("eval requires --gold")
        run_eval(
            _config_from_args(args),
            args.input,
            args.gold,
            args.report,
            fmt=args.format,
            output_dir=args.out,
        )
        print(f"report written to {args.report}", file=sys.stderr)
        return 0
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
