"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, MamoError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PIPELINE = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, help="override the output directory")
    common.add_argument("--csv", type=Path, help="where to write the metrics CSV")

    parser = argparse.ArgumentParser(prog="mamo-billing", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate calls and the delivered inbox")
    sub.add_parser("reconcile", parents=[common], help="reconcile inbox.bin into billing archives")
    sub.add_parser("assure", parents=[common], help="merge switch and billing archives")
    sub.add_parser("report", parents=[common], help="revenue report from assurance files")
    bench = sub.add_parser("bench", parents=[common], help="scaling runs at several call counts")
    bench.add_argument(
        "--counts",
        type=lambda s: [int(x) for x in s.split(",")],
        default=list(pipeline.BENCH_COUNTS),
        help="comma-separated call counts",
    )
    sub.add_parser("run", parents=[common], help="all stages in one process")
    return parser


def load_config(args) -> pipeline.RunConfig:
    config = pipeline.RunConfig.load(args.config) if args.config else pipeline.RunConfig()
    changes = {}
    if args.seed is not None:
        if not 0 <= args.seed < 1 << 64:
            raise ConfigError([("--seed", "must be a non-negative 64-bit integer")])
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    return dataclasses.replace(config, **changes) if changes else config


def _say(text: str) -> None:
    print(text, flush=True)


def dispatch(args) -> int:
    config = load_config(args)
    out = Path(config.output_dir)
    if args.command == "simulate":
        sim = pipeline.stage_simulate(config)
        _say(f"simulated {len(sim.calls)} calls, {len(sim.inbox)} delivered, {len(sim.dropped)} dropped -> {out}")
    elif args.command == "reconcile":
        rec = pipeline.stage_reconcile(config)
        _say(
            f"reconciled {len(rec.state.records)} records from {rec.messages} messages "
            f"in {rec.elapsed_ns} ns ({len(rec.state.rejects)} rejected)"
        )
    elif args.command == "assure":
        files = pipeline.stage_assure(config)
        mismatched = sum(not f.count_mark.match for f in files)
        _say(f"wrote {len(files)} assurance files, {mismatched} with count mismatch")
    elif args.command == "report":
        report = pipeline.stage_report(config)
        _say(json.dumps(report.to_dict(), sort_keys=True))
    elif args.command == "run":
        result = pipeline.run_pipeline(config)
        if args.csv:
            pipeline.emit_metrics([result.metrics], args.csv)
        _say(json.dumps(result.report.to_dict(), sort_keys=True))
    elif args.command == "bench":
        runs = pipeline.bench(config, args.counts)
        pipeline.emit_metrics(runs, args.csv or out / "bench_metrics.csv")
        for m in runs:
            _say(f"{m.message_count:>7} calls  {m.reconciliation_time_ns / 1e9:8.3f} s")
        if len(runs) > 1:
            exponent = pipeline.scaling_exponent(
                [m.message_count for m in runs], [m.reconciliation_time_ns for m in runs]
            )
            _say(f"fitted time exponent {exponent:.3f}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ConfigError as exc:
        for name, problem in exc.problems:
            print(f"config error: {name}: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (MamoError, OSError, ValueError, KeyError) as exc:
        print(f"pipeline failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
