"""Command-line front end.

    vbi-sim run   --trace F --scenario S [--policy P] [--config C.toml] [--out stats.json]
    vbi-sim gen   --spec G --seed N --out F
    vbi-sim sweep --traces DIR --scenarios LIST --out results.csv [--jobs N]

Exit codes: 0 success, 2 parse/config error, 3 lifecycle violation.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .config import ConfigError, load_config
from .engine import SCENARIOS, LifecycleViolation, report_to_json, run_simulation
from .trace import TraceError, generate_trace, load_trace, save_trace

EXIT_PARSE = 2
EXIT_LIFECYCLE = 3

SWEEP_COLUMNS = [
    "trace", "scenario", "policy", "cycles", "instructions", "ipc",
    "mem.accesses", "cache.l3.miss", "walk.accesses", "translation.calls",
    "device.data_accesses", "device.avg_access_latency", "frames.allocated",
    "zero_line.reads", "migrations",
]


def _parse_args(argv):
    ap = argparse.ArgumentParser(prog="vbi-sim",
                                 description="virtual-block memory simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replay one trace under one scenario")
    run.add_argument("--trace", required=True)
    run.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    run.add_argument("--policy", default="aware",
                     choices=["aware", "unaware", "ideal"],
                     help="placement policy (heterogeneous scenarios only)")
    run.add_argument("--config", default=None, help="TOML knob overrides")
    run.add_argument("--out", default=None, help="stats JSON path (default stdout)")

    gen = sub.add_parser("gen", help="generate a synthetic trace")
    gen.add_argument("--spec", required=True,
                     help="e.g. 'skew,p=0.9,q=0.1,vbs=10,n=100000'")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)

    sweep = sub.add_parser("sweep", help="run many traces x scenarios to CSV")
    sweep.add_argument("--traces", required=True, help="directory of .trace files")
    sweep.add_argument("--scenarios", required=True,
                       help="comma-separated scenario[:policy] list")
    sweep.add_argument("--config", default=None)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--jobs", type=int, default=1)

    return ap.parse_args(argv)


def _cmd_run(args) -> int:
    config = load_config(args.config)
    events = load_trace(args.trace)
    name = os.path.splitext(os.path.basename(args.trace))[0]
    try:
        doc = run_simulation(events, config, args.scenario, policy=args.policy,
                             trace_name=name)
    except LifecycleViolation as e:
        print(f"lifecycle violation: {e}", file=sys.stderr)
        return EXIT_LIFECYCLE
    text = report_to_json(doc)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gen(args) -> int:
    events = generate_trace(args.spec, args.seed)
    save_trace(args.out, events)
    print(f"wrote {len(events)} events to {args.out}")
    return 0


def _sweep_one(job):
    path, scenario, policy, config_path = job
    config = load_config(config_path)
    events = load_trace(path)
    name = os.path.splitext(os.path.basename(path))[0]
    return run_simulation(events, config, scenario, policy=policy,
                          trace_name=name)


def _cmd_sweep(args) -> int:
    paths = sorted(
        os.path.join(args.traces, f)
        for f in os.listdir(args.traces)
        if f.endswith(".trace") or f.endswith(".trace.gz")
    )
    if not paths:
        print(f"no .trace files under {args.traces}", file=sys.stderr)
        return EXIT_PARSE
    combos = []
    for spec in args.scenarios.split(","):
        spec = spec.strip()
        scenario, _, policy = spec.partition(":")
        if scenario not in SCENARIOS:
            print(f"unknown scenario {scenario!r}", file=sys.stderr)
            return EXIT_PARSE
        combos.append((scenario, policy or "aware"))
    jobs = [(p, sc, pol, args.config) for p in paths for sc, pol in combos]
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                docs = list(pool.map(_sweep_one, jobs))
        else:
            docs = [_sweep_one(j) for j in jobs]
    except LifecycleViolation as e:
        print(f"lifecycle violation: {e}", file=sys.stderr)
        return EXIT_LIFECYCLE
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for doc in docs:
            writer.writerow([doc.get(c, 0) for c in SWEEP_COLUMNS])
    print(f"wrote {len(docs)} rows to {args.out}")
    return 0


def main(argv=None) -> int:
    args = _parse_args(argv if argv is not None else sys.argv[1:])
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
    except (TraceError, ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
