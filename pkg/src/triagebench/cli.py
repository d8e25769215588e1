"""Command-line entry point.

Subcommands: validate, ingest, evaluate, audit, sweep-shots, report. Every
run command re-validates the config first and refuses to start while
findings remain, so no model call happens against a broken setup.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import check_endpoint_reachability, load_config
from .dataset import load_dataset, write_dataset
from .runner import Runner


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", required=True, help="experiment config YAML")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--output-dir", help="override the config output directory")


def _overrides(args) -> dict:
    return {"seed": args.seed, "output_dir": args.output_dir}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triagebench",
        description="Evaluate triage-prediction strategies and audit demographic bias.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a config and print the resolved form")
    _add_config_arg(p_validate)
    p_validate.add_argument(
        "--check-endpoints", action="store_true", help="also probe endpoint reachability"
    )

    p_ingest = sub.add_parser("ingest", help="convert a foreign file to the canonical schema")
    _add_config_arg(p_ingest)
    p_ingest.add_argument("--input", help="foreign file (default: dataset.path from config)")
    p_ingest.add_argument("--output", required=True, help="canonical dataset file to write")

    for name, help_text in (
        ("evaluate", "run every strategy on the test set and emit metric reports"),
        ("audit", "run the 12-variant counterfactual audit"),
        ("sweep-shots", "evaluate each strategy across the configured shot counts"),
        ("report", "re-render tables and figures from emitted artifacts"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_arg(p)

    return parser


def _load_validated(args):
    config, findings = load_config(args.config, _overrides(args))
    if findings:
        for f in findings:
            print(f"finding: {f.key}: {f.message}", file=sys.stderr)
        sys.exit(1)
    return config


def cmd_validate(args) -> int:
    config, findings = load_config(args.config, _overrides(args))
    if args.check_endpoints and not findings:
        findings = findings + check_endpoint_reachability(config)
    for f in findings:
        print(f"finding: {f.key}: {f.message}")
    print(f"{len(findings)} findings")
    if not findings:
        print("resolved config:")
        print(json.dumps(config.raw, indent=2, sort_keys=True, default=str))
    return 1 if findings else 0


def cmd_ingest(args) -> int:
    config = _load_validated(args)
    source = args.input or config.dataset.path
    if not source:
        print("ingest needs --input or dataset.path in the config", file=sys.stderr)
        return 1
    result = load_dataset(
        source,
        protocol=config.protocol,
        schema_map=dict(config.dataset.schema_map),
        delimiter=config.dataset.delimiter,
    )
    write_dataset(result.dataset, args.output)
    for rejection in result.rejections:
        print(f"rejected row {rejection.row_number}: {rejection.reason} ({rejection.detail})")
    print(
        f"wrote {len(result.dataset)} records to {args.output} "
        f"({len(result.rejections)} rows rejected)"
    )
    return 0


def cmd_run(args, command: str) -> int:
    config = _load_validated(args)
    runner = Runner(config)
    if command == "evaluate":
        manifest = runner.evaluate()
        print((Path(config.output_dir) / "reports" / "metrics.txt").read_text("utf-8"), end="")
    elif command == "audit":
        manifest = runner.audit()
        print((Path(config.output_dir) / "reports" / "audit.txt").read_text("utf-8"), end="")
    elif command == "sweep-shots":
        manifest = runner.sweep_shots()
    else:
        raise ValueError(command)
    print(f"manifest: {manifest}")
    return 0


def cmd_report(args) -> int:
    config = _load_validated(args)
    runner = Runner(config)
    for path in runner.report():
        print(f"rendered: {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return cmd_validate(args)
    if args.command == "ingest":
        return cmd_ingest(args)
    if args.command == "report":
        return cmd_report(args)
    return cmd_run(args, args.command)


if __name__ == "__main__":
    sys.exit(main())
