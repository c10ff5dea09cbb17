"""Command-line entry point.

Usage:

    shiftsched solve --scenario path/to/scenario.json [--config 1..9|custom]
               [--stage1-only] [--early-stop] [--out DIR] [--params PATH]
               [--threads N]

Exit codes: 0 on a feasible result, 2 on stage-1 failure, 1 on usage or I/O
errors.  Set SHIFTSCHED_LOG=DEBUG|INFO|WARNING to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys as _sys

from .lti_core import ConfigurationError
from .reports import emit_reports, fmt9
from .scenario_io import PipelineError, load_scenario, run_pipeline

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(_sys.stderr)
        _sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shiftsched",
                     description="Two-stage scheduling of rigid-profile "
                                 "load shifts under LTI state constraints")
    sub = parser.add_subparsers(dest="command", required=True)
    solve = sub.add_parser("solve", help="run the two-stage pipeline")
    solve.add_argument("--scenario", required=True, help="scenario JSON path")
    solve.add_argument("--config", default="custom",
                       help="study configuration 1..9, or 'custom' to use "
                            "the scenario's own discretization")
    solve.add_argument("--stage1-only", action="store_true",
                       help="skip the SQP refinement stage")
    solve.add_argument("--early-stop", action="store_true",
                       help="stop stage 1 at the first accepted upper bound")
    solve.add_argument("--out", default=None,
                       help="directory for the report bundle")
    solve.add_argument("--params", default=None,
                       help="JSON file with {'ehsipa': {...}, 'sqp': {...}} "
                            "parameter overrides")
    solve.add_argument("--threads", type=int, default=1,
                       help="worker threads for per-row feasibility scans")
    solve.add_argument("--verify-step", type=float, default=0.01,
                       help="grid step of the final dense verification")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("SHIFTSCHED_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    config: int | None
    if args.config == "custom":
        config = None
    else:
        try:
            config = int(args.config)
        except ValueError:
            print(f"error: bad --config value {args.config!r}",
                  file=_sys.stderr)
            return 1
        if config not in range(1, 10):
            print("error: --config must be 1..9 or 'custom'",
                  file=_sys.stderr)
            return 1

    overrides = {"ehsipa": {}, "sqp": {}}
    try:
        scenario = load_scenario(args.scenario)
        if args.params:
            with open(args.params, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
            overrides["ehsipa"].update(loaded.get("ehsipa", {}))
            overrides["sqp"].update(loaded.get("sqp", {}))
    except (OSError, json.JSONDecodeError, ConfigurationError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1

    try:
        report = run_pipeline(scenario, config=config,
                              stage1_only=args.stage1_only,
                              early_stop=args.early_stop,
                              threads=max(1, args.threads),
                              verify_step=args.verify_step,
                              ehsipa_overrides=overrides["ehsipa"],
                              sqp_overrides=overrides["sqp"])
    except PipelineError as exc:
        print(f"stage-1 failure: {exc}", file=_sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 1

    print(f"scenario       {report.scenario_name}")
    print(f"configuration  {report.config_label}")
    print(f"status         {report.status}")
    if report.schedule is not None:
        shifts = " ".join(fmt9(t) for t in report.schedule.shifts)
        print(f"shifts (min)   {shifts}")
    print(f"final cost     {fmt9(report.final_cost)}")
    for key, val in report.bounds.items():
        print(f"bounds.{key:<24} {fmt9(val)}")
    if report.verification is not None:
        print(f"worst margin   {fmt9(report.verification.worst())} "
              f"(dense step {fmt9(report.verification.grid_step)})")
    print(f"wall seconds   {fmt9(report.wall_time)}")
    if args.out:
        try:
            files = emit_reports(report, args.out)
        except OSError as exc:
            print(f"error: {exc}", file=_sys.stderr)
            return 1
        print(f"report bundle  {args.out} ({len(files)} files)")
    return 0 if report.feasible else 2


if __name__ == "__main__":
    raise SystemExit(main())
