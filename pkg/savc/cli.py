"""Command-line driver: run, compare, metrics, dump-embeddings and schema."""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Any

from pydantic import ValidationError

from savc.core.config import get_settings
from savc.core.constants import EMBEDDINGS_FILE
from savc.core.errors import ConfigSchemaError, InvalidConfigError, SavcError, error_response
from savc.schemas.enums import AblationToggle, FantasySetName
from savc.schemas.experiment import ExperimentConfig
from savc.services.experiment import (
    RunPlan,
    compare_runs,
    dump_embeddings,
    load_experiment_config,
    parse_override,
    run_experiment,
    run_metrics,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _configure_logging(level: str) -> None:
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides = dict(parse_override(assignment) for assignment in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = str(args.output_dir)
    if args.fantasy is not None:
        overrides["fantasy"] = args.fantasy
    for toggle in args.disable or []:
        overrides[f"toggles.{toggle}"] = False
    return overrides


def _run(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, _overrides(args))
    outcome = run_experiment(config, dry_run=args.dry_run)
    if isinstance(outcome, RunPlan):
        print(json.dumps(outcome.describe(), indent=2))
        return EXIT_OK
    if outcome.session_result is not None:
        print(outcome.session_result.render(config.name))
    print(f"output_dir={outcome.output_dir}")
    return EXIT_OK


def _compare(args: argparse.Namespace) -> int:
    table = compare_runs(args.runs, args.baseline)
    print(table.render())
    if args.output is not None:
        args.output.write_text(table.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def _metrics(args: argparse.Namespace) -> int:
    output_dir = args.output_dir or args.checkpoint.parent / "metrics"
    report = run_metrics(args.checkpoint, output_dir)
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def _dump_embeddings(args: argparse.Namespace) -> int:
    output = args.output or args.checkpoint.parent / EMBEDDINGS_FILE
    frame = dump_embeddings(args.checkpoint, output, partition=args.partition)
    print(f"rows={len(frame)} path={output}")
    return EXIT_OK


def _schema(_: argparse.Namespace) -> int:
    print(json.dumps(ExperimentConfig.model_json_schema(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="savc", description="Few-shot class-incremental experiments")
    verbs = parser.add_subparsers(dest="verb", required=True)

    run = verbs.add_parser("run", help="Train and evaluate every session of an experiment config")
    run.add_argument("config", type=Path, help="Experiment config (JSON)")
    run.add_argument("--seed", type=int, default=None, help="Override the config seed")
    run.add_argument("--output-dir", type=Path, default=None, help="Run directory (default: $SAVC_OUTPUT_ROOT/<name>-<hash>)")
    run.add_argument(
        "--fantasy",
        choices=[name.value for name in FantasySetName if name != FantasySetName.CUSTOM],
        default=None,
        help="Override the named fantasy set",
    )
    run.add_argument(
        "--disable",
        action="append",
        choices=[toggle.value for toggle in AblationToggle],
        help="Turn an ablation toggle off (repeatable)",
    )
    run.add_argument("--set", action="append", metavar="KEY=JSON", help="Override any config field by dotted key")
    run.add_argument("--dry-run", action="store_true", help="Validate the config and print the session schedule")
    run.set_defaults(handler=_run)

    compare = verbs.add_parser("compare", help="Tabulate per-session accuracy of several runs")
    compare.add_argument("runs", type=Path, nargs="+", help="Run directories")
    compare.add_argument("--baseline", required=True, help="Run name used for delta_last")
    compare.add_argument("--output", type=Path, default=None, help="Also write the table as JSON")
    compare.set_defaults(handler=_compare)

    metrics = verbs.add_parser("metrics", help="Re-run evaluation and separation analytics on a checkpoint")
    metrics.add_argument("checkpoint", type=Path)
    metrics.add_argument("--output-dir", type=Path, default=None)
    metrics.set_defaults(handler=_metrics)

    dump = verbs.add_parser("dump-embeddings", help="Write identity-variant features of a checkpoint as CSV")
    dump.add_argument("checkpoint", type=Path)
    dump.add_argument("output", type=Path, nargs="?", default=None, help="CSV path (default: next to the checkpoint)")
    dump.add_argument("--partition", choices=["test", "train"], default="test")
    dump.set_defaults(handler=_dump_embeddings)

    schema = verbs.add_parser("schema", help="Print the experiment config JSON schema")
    schema.set_defaults(handler=_schema)
    return parser


def _emit_error(exc: BaseException) -> None:
    print(error_response(exc).model_dump_json(), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging(get_settings().log_level)
    except ValidationError as exc:
        _emit_error(ConfigSchemaError.from_validation_error(exc))
        return EXIT_CONFIG_ERROR

    try:
        return args.handler(args)
    except InvalidConfigError as exc:
        _emit_error(exc)
        return EXIT_CONFIG_ERROR
    except (SavcError, OSError) as exc:
        _emit_error(exc)
        return EXIT_FAILURE
    except Exception as exc:
        logger.exception("Unhandled error")
        _emit_error(exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
