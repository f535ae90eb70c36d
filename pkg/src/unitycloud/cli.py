"""Command-line scenario runner.

    unity-sim run <scenario|preset> [--seed N] [--set key=value]... [--out DIR]
    unity-sim list-presets
    unity-sim dump-trace <run-dir>
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import scenario as sc_mod


def cmd_run(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        sc = sc_mod.load(args.scenario, overrides)
    except (sc_mod.ScenarioError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = sc_mod.run(sc)
    report = sc_mod.text_report(result)
    csv = sc_mod.metrics_csv(result)
    print(report, end="")
    print()
    print(csv, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(csv)
        (out / "report.txt").write_text(report)
        (out / "summary.json").write_text(json.dumps(_summary(result), indent=2, sort_keys=True) + "\n")
        trace = result.violation.trace if result.violation else result.system.sim.trace
        (out / "trace.csv").write_text(sc_mod.format_trace(trace))
    if result.violation is not None:
        where = Path(args.out or ".") / "trace.csv"
        if not args.out:
            where.write_text(sc_mod.format_trace(result.violation.trace))
        print(f"invariant violated: {result.violation.description}; trace written to {where}", file=sys.stderr)
        return 1
    return 0


def _summary(result) -> dict:
    m = result.metrics
    return {
        "scenario": result.scenario.name,
        "seed": result.scenario.seed,
        "ok": result.ok,
        "latency": sc_mod.latency_summary(result),
        "lease_switches": {str(k): v for k, v in sorted(m.lease_switches.items())},
        "faults": [[f.time, f.node, f.kind, f.de] for f in m.faults],
        "io_seconds": (result.io_end - result.io_start) / 1e6,
    }


def cmd_list(args) -> int:
    for name in sc_mod.list_presets():
        print(name)
    return 0


def cmd_dump_trace(args) -> int:
    path = Path(args.run_dir) / "trace.csv"
    if not path.exists():
        print(f"error: no trace at {path}", file=sys.stderr)
        return 2
    sys.stdout.write(path.read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unity-sim", description="Run simulated personal-cloud scenarios.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario file or preset")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scenario key (dotted)")
    r.add_argument("--out", help="directory for metrics.csv, report.txt, summary.json and trace.csv")
    r.set_defaults(fn=cmd_run)
    lp = sub.add_parser("list-presets", help="list built-in scenarios")
    lp.set_defaults(fn=cmd_list)
    d = sub.add_parser("dump-trace", help="print the event trace of a run directory")
    d.add_argument("run_dir")
    d.set_defaults(fn=cmd_dump_trace)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
