"""Command-line entry point.

Subcommands: simulate (run the configured sweep and write a bundle), analyze
(statistics tables from a bundle), report (box-plot data files), gas-audit
(replay the published gas table), selftest (quick internal checks).

Exit codes: 0 success, 2 configuration error, 3 simulation failure,
4 incomplete bundle, 5 gas mismatch.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time

from . import __version__
from .chain import SimulationFailure
from .contracts import GasSchedule, audit_rows
from .reporting import (
    ConfigError,
    IncompleteBundle,
    analyze_bundle,
    default_config,
    load_config,
    read_bundle,
    report_bundle,
    resolve_config,
    run_simulation,
    write_bundle,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_INCOMPLETE = 4
EXIT_GAS_MISMATCH = 5

OUTPUT_ENV_VAR = "CHAINMARKET_OUT"


def _default_out() -> str:
    return os.environ.get(OUTPUT_ENV_VAR, "results")


def cmd_simulate(args: argparse.Namespace) -> int:
    raw = load_config(args.config) if args.config else default_config()
    resolved = resolve_config(raw, seed_override=args.seed, phase_filter=args.phase)
    started = time.perf_counter()
    records, blocks = run_simulation(resolved)
    bundle = write_bundle(args.out, resolved, records, blocks)
    elapsed = time.perf_counter() - started
    print(
        f"{bundle.directory}: {len(records)} records, {len(blocks)} blocks,"
        f" {elapsed:.2f}s"
    )
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    bundle = read_bundle(args.bundle)
    written = analyze_bundle(bundle)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    bundle = read_bundle(args.bundle)
    written = report_bundle(bundle)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_gas_audit(_args: argparse.Namespace) -> int:
    rows = audit_rows()
    width = max(len(r["path"]) for r in rows)
    mismatches = []
    for r in rows:
        status = "ok" if r["match"] else "MISMATCH"
        print(f"{r['path']:<{width}}  expected {r['expected']:>8}  actual {r['actual']:>8}  {status}")
        if not r["match"]:
            mismatches.append(r["path"])
    if mismatches:
        print(f"gas audit failed on: {', '.join(mismatches)}", file=sys.stderr)
        return EXIT_GAS_MISMATCH
    print(f"gas audit: {len(rows)} paths match the published table")
    return EXIT_OK


def cmd_selftest(_args: argparse.Namespace) -> int:
    from .stats import chi2_upper_tail, cliffs_delta, kruskal_wallis
    from .workload import ExperimentPlan, run_phase1

    failures = []

    rows = audit_rows(GasSchedule())
    if not all(r["match"] for r in rows):
        print("selftest: gas table mismatch", file=sys.stderr)
        return EXIT_GAS_MISMATCH
    print("gas table: ok")

    kw = kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
    if abs(kw.h_statistic - 7.2) > 1e-9 or abs(kw.p_value - math.exp(-3.6)) > 1e-9:
        failures.append(f"kruskal_wallis oracle: H={kw.h_statistic}, p={kw.p_value}")
    else:
        print("kruskal-wallis oracle: ok")

    if chi2_upper_tail(0.0, 4) != 1.0:
        failures.append("chi2 tail at zero")
    delta = cliffs_delta([1, 2, 3], [4, 5, 6])
    if delta.delta != -1.0 or delta.magnitude != "large":
        failures.append(f"cliffs delta oracle: {delta}")
    else:
        print("cliffs delta oracle: ok")

    plan = ExperimentPlan(batch_sizes=(2,), rounds=1, seed=7)
    first = run_phase1(plan)
    second = run_phase1(plan)
    if first != second:
        failures.append("replay determinism")
    else:
        print("replay determinism: ok")

    for failure in failures:
        print(f"selftest: {failure}", file=sys.stderr)
    return EXIT_OK if not failures else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chainmarket",
        description="Simulated PoS marketplace chain and latency analysis",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the configured sweep into a bundle")
    p.add_argument("--config", help="JSON config path (defaults are built in)")
    p.add_argument("--out", default=None, help=f"output directory (or ${OUTPUT_ENV_VAR})")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument(
        "--phase",
        choices=("preliminary_agreement", "enforcement"),
        default=None,
        help="run only one phase",
    )
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="write statistics tables into a bundle")
    p.add_argument("bundle", help="bundle directory from simulate")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="write box-plot data files into a bundle")
    p.add_argument("bundle", help="bundle directory from simulate")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gas-audit", help="replay every published gas value")
    p.set_defaults(func=cmd_gas_audit)

    p = sub.add_parser("selftest", help="fast internal consistency checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None and args.command == "simulate":
        args.out = _default_out()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationFailure as exc:
        print(f"simulation failure: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except IncompleteBundle as exc:
        print(f"incomplete bundle: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE


if __name__ == "__main__":
    sys.exit(main())
