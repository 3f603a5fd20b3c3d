"""Command-line surface.

    adhoc-sim run --scenario <path> [--seed N] [--until MS] --out <dir>
                  [--format json|csv|both] [--events]
    adhoc-sim validate --scenario <path>
    adhoc-sim batch --scenarios <dir> --seeds A..B --out <dir>
                    [--format json|csv|both] [--events]

Exit codes: 0 success, 1 parse/validation failure, 2 runtime invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

from .errors import ScenarioParseError, ScenarioValidationError
from .kernel import SimulationAbort
from .runner import run_scenario
from .scenario import load_scenario

log = logging.getLogger("adhoc_sim")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


def _setup_logging() -> None:
    level = os.environ.get("ADHOC_SIM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def write_outputs(out_dir, summary, series_rows, series_columns, event_log,
                  fmt="both", events=False) -> None:
    os.makedirs(out_dir, exist_ok=True)
    if fmt in ("json", "both"):
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, sort_keys=True, indent=2)
            fh.write("\n")
    if fmt in ("csv", "both"):
        with open(
            os.path.join(out_dir, "series.csv"), "w", encoding="utf-8", newline=""
        ) as fh:
            writer = csv.writer(fh)
            writer.writerow(series_columns)
            writer.writerows(series_rows)
    if events:
        with open(os.path.join(out_dir, "events.ndjson"), "w", encoding="utf-8") as fh:
            fh.write(event_log.to_ndjson())


def cmd_validate(args) -> int:
    try:
        load_scenario(args.scenario)
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ScenarioValidationError as exc:
        for diag in exc.diagnostics:
            print(f"invalid: {diag}", file=sys.stderr)
        return EXIT_INVALID
    print("OK")
    return EXIT_OK


def _run_one(scenario_path, out_dir, seed=None, until=None, fmt="both",
             events=False) -> int:
    try:
        scenario = load_scenario(scenario_path)
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ScenarioValidationError as exc:
        for diag in exc.diagnostics:
            print(f"invalid: {diag}", file=sys.stderr)
        return EXIT_INVALID
    if until is not None:
        scenario = dataclasses.replace(scenario, run_until=until)
    try:
        summary, series_rows, sim = run_scenario(scenario, seed_override=seed)
    except SimulationAbort as exc:
        print(f"runtime invariant breach: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_outputs(
        out_dir, summary, series_rows, sim.series_columns, sim.sim.log,
        fmt=fmt, events=events,
    )
    log.info("wrote %s (seed %s)", out_dir, summary["seed"])
    return EXIT_OK


def cmd_run(args) -> int:
    return _run_one(
        args.scenario, args.out, seed=args.seed, until=args.until,
        fmt=args.format, events=args.events,
    )


def _parse_seed_range(text):
    if ".." in text:
        a, b = text.split("..", 1)
        return range(int(a), int(b) + 1)
    return [int(text)]


def cmd_batch(args) -> int:
    names = sorted(
        f for f in os.listdir(args.scenarios) if f.endswith(".json")
    )
    if not names:
        print(f"error: no scenario files in {args.scenarios}", file=sys.stderr)
        return EXIT_INVALID
    worst = EXIT_OK
    for name in names:
        stem = name[: -len(".json")]
        for seed in _parse_seed_range(args.seeds):
            out_dir = os.path.join(args.out, f"{stem}-seed{seed}")
            code = _run_one(
                os.path.join(args.scenarios, name), out_dir, seed=seed,
                fmt=args.format, events=args.events,
            )
            worst = max(worst, code)
    return worst


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adhoc-sim",
        description="Deterministic simulator for ad hoc clouds on harvested machines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario")
    run_p.add_argument("--scenario", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--until", type=int, default=None)
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--format", choices=["json", "csv", "both"], default="both")
    run_p.add_argument("--events", action="store_true",
                       help="also export the full event log (ndjson)")
    run_p.set_defaults(func=cmd_run)

    val_p = sub.add_parser("validate", help="parse and validate without running")
    val_p.add_argument("--scenario", required=True)
    val_p.set_defaults(func=cmd_validate)

    batch_p = sub.add_parser("batch", help="run every scenario in a directory over a seed range")
    batch_p.add_argument("--scenarios", required=True)
    batch_p.add_argument("--seeds", required=True, help="A..B inclusive, or a single seed")
    batch_p.add_argument("--out", required=True)
    batch_p.add_argument("--format", choices=["json", "csv", "both"], default="both")
    batch_p.add_argument("--events", action="store_true")
    batch_p.set_defaults(func=cmd_batch)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
