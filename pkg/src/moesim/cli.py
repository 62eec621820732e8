"""``moesim`` command line: run one scenario file and write its report."""
from __future__ import annotations

import argparse
import sys

from .scenario import (EXIT_CONFIG, MODES, Scenario, ScenarioError, export_trace,
                       run_scenario)


def _table(report: dict) -> str:
    rows = []

    def walk(prefix, value):
        if isinstance(value, dict):
            for k in sorted(value):
                walk(f"{prefix}.{k}" if prefix else k, value[k])
        else:
            rows.append((prefix, value))

    walk("", report["metrics"])
    for k, v in sorted(report["verdicts"].items()):
        rows.append((f"verdict.{k}", "PASS" if v else "FAIL"))
    width = max((len(k) for k, _ in rows), default=10)
    lines = [f"mode: {report['mode']}", "-" * (width + 24)]
    lines += [f"{k:<{width}}  {v}" for k, v in rows]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moesim", description=__doc__)
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--mode", choices=MODES, help="override the scenario's mode")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--trace", help="write trace-event JSON here")
    p.add_argument("--seed", type=int, help="override the scenario/workload seed")
    p.add_argument("--quiet", action="store_true", help="suppress the human-readable table")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = Scenario.load(args.scenario).with_overrides(mode=args.mode, seed=args.seed)
        result = run_scenario(scenario)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.out:
        with open(args.out, "w") as fh:
            fh.write(result.report_json())
    if args.trace:
        export_trace(result, args.trace)
    if not args.quiet:
        print(_table(result.report))
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
