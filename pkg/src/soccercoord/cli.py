"""Command line: ``soccercoord run|check|replay``.

Exit codes: 0 clean, 1 safety violations, 2 usage, parse or range errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from .checker import check_trace
from .replay import OutOfRange, export_diagram, render_text, snapshot_at
from .runner import run_scenario
from .scenario import ScenarioError, load_scenario
from .trace import TraceError, read_trace

EXIT_OK, EXIT_VIOLATIONS, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 already; keep the message terse
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="soccercoord", description="Deterministic robot soccer coordination simulator")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario and write its trace")
    run.add_argument("--scenario", required=True, help="scenario YAML file")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--out", help="trace output path (default: <scenario>.trace.jsonl)")
    run.add_argument("--duration", type=float, help="override the duration in seconds")
    run.add_argument("--loss", type=float, help="override the bus loss probability")
    run.add_argument("--disable-teamplay", action="store_true", help="run without task negotiation or clear-out")

    check = sub.add_parser("check", help="re-validate a trace offline")
    check.add_argument("trace", help="trace file")

    replay = sub.add_parser("replay", help="print the field state at a time")
    replay.add_argument("trace", help="trace file")
    replay.add_argument("--at", type=float, required=True, help="time in seconds")
    replay.add_argument("--export", help="also write a field diagram (PNG, needs matplotlib)")
    return p


def _run(args) -> int:
    scenario = load_scenario(args.scenario)
    scenario = scenario.with_overrides(
        seed=args.seed, duration=args.duration, loss=args.loss, teamplay=False if args.disable_teamplay else None,
    )
    out_path = args.out or (args.scenario.rsplit(".", 1)[0] + ".trace.jsonl")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        result = run_scenario(scenario, fh)
    print(json.dumps({"trace": out_path, **result.summary}, indent=2, sort_keys=True))
    for f in result.safety_violations:
        print(f"VIOLATION t={f.time:.2f} {f.rule}: {f.detail}", file=sys.stderr)
    return result.exit_code


def _check(args) -> int:
    report = check_trace(args.trace)
    for f in report.findings:
        print(f"t={f.time:.2f} {f.rule}" + (f" team={f.team}" if f.team else "") + (f" robot={f.robot}" if f.robot else "") + f": {f.detail}")
    if not report.consistent_with_run:
        print("note: findings differ from the violations recorded by the run", file=sys.stderr)
    print(f"{len(report.findings)} finding(s), {len(report.safety)} safety violation(s)")
    return EXIT_VIOLATIONS if report.safety else EXIT_OK


def _replay(args) -> int:
    trace = read_trace(args.trace)
    snap = snapshot_at(trace, args.at)
    print(render_text(snap))
    if args.export:
        from .geometry import FieldModel

        export_diagram(snap, FieldModel(**trace.header["field"]), args.export)
        print(f"diagram written to {args.export}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": _run, "check": _check, "replay": _replay}
    try:
        return handlers[args.verb](args)
    except (ScenarioError, TraceError, OutOfRange) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
