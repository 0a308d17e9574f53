"""Command-line entry point.

Subcommands: run-matrix (batch experiments), opm-compare (prompt-format
study), serve (live WebSocket sessions), replay (print a recorded trace).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from ..simulation import build_standard_scenario, load_scenario
from .compare import compare_formats, format_report
from .matrix import DEFAULT_CONTROLLERS, DEFAULT_REPS, DEFAULT_SPEEDS, format_summary, run_matrix, write_csv


def _parse_list(text: str, cast):
    return tuple(cast(part) for part in text.split(",") if part)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixsim",
                                     description="Mixed-traffic interaction simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("run-matrix", help="run the controller x speed x reps batch")
    m.add_argument("--controllers", default=",".join(DEFAULT_CONTROLLERS),
                   help="comma-separated controller names")
    m.add_argument("--speeds", default=",".join(f"{s:g}" for s in DEFAULT_SPEEDS),
                   help="comma-separated initial speeds (m/s)")
    m.add_argument("--reps", type=int, default=DEFAULT_REPS)
    m.add_argument("--seed", type=int, default=7)
    m.add_argument("--geometry", choices=("intersection", "merging"), default="intersection")
    m.add_argument("--out", type=Path, default=None, help="metrics CSV path")
    m.add_argument("--audit", type=Path, default=None,
                   help="trajectory candidate audit dump (JSON lines)")

    c = sub.add_parser("opm-compare", help="compare prompt serializations")
    c.add_argument("--scenes", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--reasoner-url", default=None,
                   help="optional HTTP endpoint to measure latency/agreement against")
    c.add_argument("--out", type=Path, default=None, help="JSON report path")

    s = sub.add_parser("serve", help="run the live session server")
    s.add_argument("--scenario", type=Path, default=None,
                   help="scenario JSON (defaults to the standard intersection "
                        "with the HDV driven by the client)")
    s.add_argument("--port", type=int, default=8700)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--role", choices=("model", "human", "random"), default="random")
    s.add_argument("--pacing", choices=("realtime", "free", "lockstep"), default="realtime")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--log", type=Path, default=Path("sessions.jsonl"))
    s.add_argument("--trace-dir", type=Path, default=None)

    r = sub.add_parser("replay", help="print a recorded trace")
    r.add_argument("--trace", type=Path, required=True)
    r.add_argument("--speed", type=float, default=0.0,
                   help="playback rate multiplier; 0 prints instantly")
    return parser


def _cmd_run_matrix(args) -> int:
    controllers = _parse_list(args.controllers, str)
    speeds = _parse_list(args.speeds, float)
    audit_sink = [] if args.audit else None
    result = run_matrix(controllers=controllers, speeds=speeds, reps=args.reps,
                        seed=args.seed, geometry=args.geometry,
                        audit_sink=audit_sink)
    csv_text = write_csv(result.records, args.out)
    if args.out is None:
        sys.stdout.write(csv_text)
    else:
        print(f"wrote {len(result.records)} rows to {args.out}")
    if args.audit and audit_sink is not None:
        with open(args.audit, "w") as fh:
            for row in audit_sink:
                fh.write(json.dumps(row) + "\n")
        print(f"wrote {len(audit_sink)} candidate audits to {args.audit}")
    print(format_summary(result.summary))
    return 0


def _cmd_opm_compare(args) -> int:
    report = compare_formats(n_scenes=args.scenes, seed=args.seed,
                             endpoint=args.reasoner_url)
    if args.out is not None:
        args.out.write_text(json.dumps(report, indent=2) + "\n")
    print(format_report(report))
    return 0


def _cmd_serve(args) -> int:
    from .server import serve

    if args.scenario is not None:
        document = json.loads(args.scenario.read_text())
    else:
        document = build_standard_scenario(controller="proposed")
        for entry in document["vehicles"]:
            if entry["id"] == "HDV":
                entry["controller"] = "external"
                entry.pop("style", None)
    load_scenario(document)
    serve(document, port=args.port, host=args.host, role=args.role,
          pacing=args.pacing, log_path=args.log, trace_dir=args.trace_dir,
          seed=args.seed)
    return 0


def _cmd_replay(args) -> int:
    prev_t = None
    with open(args.trace) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if args.speed > 0 and prev_t is not None:
                time.sleep(max(0.0, (row["t"] - prev_t) / args.speed))
            prev_t = row["t"]
            cars = " ".join(
                f"{v['id']}@({v['x']:.1f},{v['y']:.1f}) v={v['v']:.2f}"
                for v in row["vehicles"]
            )
            ehmi = "".join(f"  [{m['source']}] {m['text']}" for m in row.get("ehmi", []))
            print(f"t={row['t']:6.2f} {cars}{ehmi}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run-matrix":
        return _cmd_run_matrix(args)
    if args.command == "opm-compare":
        return _cmd_opm_compare(args)
    if args.command == "serve":
        return _cmd_serve(args)
    if args.command == "replay":
        return _cmd_replay(args)
    return 2


if __name__ == "__main__":
    sys.exit(main())
