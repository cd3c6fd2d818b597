"""Command-line front end: ``hfsense analyze|simulate|episodes``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from . import analytic, sim
from .rng import entropy_seed

OUT_DIR_ENV = "HFSENSE_OUT_DIR"

FIGURES = {
    "2a": ("fig2a.csv", analytic.packet_length_sweep, ("packet_len", "power_of_two", "throughput_bps")),
    "2b": ("fig2b.csv", analytic.block_length_sweep, ("packet_len", "ber", "block_len", "throughput_bps")),
}
TABLES = {
    "contention": ("contention.csv", analytic.contention_rows,
                   ("contenders", "slots", "expected_successes", "failure_prob")),
    "capacity": ("capacity.csv", analytic.capacity_rows, ("mode", "users", "seconds_per_user")),
}

ANALYZE_EPILOG = """\
CSV columns
  --figure 2a   packet_len        packet length in bits (8..4096)
                power_of_two      1 when packet_len is a power of two
                throughput_bps    useful payload bits/s at 4096 bit/s, BER 1e-2, 1000 sensors
  --figure 2b   packet_len        32 or 64
                ber               bit error rate (1e-2 or 1.1e-2)
                block_len         block length in bits (64..8192)
                throughput_bps    block info bits/s after packet and block retransmissions
  --table contention
                contenders        sensors contending in one region
                slots             contention slots in the region
                expected_successes  mean number of slots holding exactly one sensor
                failure_prob      chance no slot holds exactly one sensor
  --table capacity
                mode              slow, fast or mixed (half the day each)
                users             sensors that fit one hourly report per hour
                seconds_per_user  data-region seconds one hourly report needs (blank for mixed)

Output goes to --out (a file, or a directory when several outputs are
requested), else to $HFSENSE_OUT_DIR, else to stdout.
"""

SIMULATE_EPILOG = """\
The scenario is a JSON object; every key is optional and unknown keys are
rejected.  Metrics are written as one JSON object with sorted keys to
--out, else $HFSENSE_OUT_DIR/metrics-<seed>.json, else stdout.  --trace
writes an event log as CSV with columns t_ns (event time in ns), event
(frame_start, contention, detection, report_verified, probe, downgrade) and
detail (remaining fields as JSON).  Exit status is 0 iff the run finished
without an invariant violation, 2 for a bad scenario, 3 for a violation.
"""

EPISODES_EPILOG = """\
Each episode is an independent run holding one emergency: all contenders
detect at one instant drawn uniformly in [1, 2) s, the channel is fixed
(worst: slow rate, BER 1e-2; fast: fast rate, BER 1e-2) and hourly traffic
is off.  Latency runs from first detection to the last report verified.
"""


def _rows_to_csv(rows, columns, fh):
    w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _destination(out: str | None, default_name: str, several: bool) -> Path | None:
    if out:
        p = Path(out)
        if several or p.is_dir():
            p.mkdir(parents=True, exist_ok=True)
            return p / default_name
        return p
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        d = Path(env)
        d.mkdir(parents=True, exist_ok=True)
        return d / default_name
    return None


def _emit(text: str, dest: Path | None):
    if dest is None:
        sys.stdout.write(text)
    else:
        if dest.parent != Path(""):
            dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(text)
        print(f"wrote {dest}", file=sys.stderr)


def cmd_analyze(args) -> int:
    jobs = []
    if args.figure:
        jobs.append(FIGURES[args.figure])
    if args.table:
        jobs.append(TABLES[args.table])
    if not jobs:
        print("analyze: give --figure and/or --table", file=sys.stderr)
        return 2
    for name, fn, columns in jobs:
        buf = io.StringIO()
        _rows_to_csv(fn(), columns, buf)
        _emit(buf.getvalue(), _destination(args.out, name, len(jobs) > 1))
    return 0


def cmd_simulate(args) -> int:
    try:
        with open(args.scenario) as fh:
            data = json.load(fh)
    except OSError as exc:
        print(f"simulate: cannot read {args.scenario}: {exc.strerror}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"simulate: {args.scenario} is not valid JSON: {exc}", file=sys.stderr)
        return 2
    if not isinstance(data, dict):
        print("simulate: scenario must be a JSON object", file=sys.stderr)
        return 2
    if args.seed is not None:
        data["seed"] = args.seed
    elif "seed" not in data:
        data["seed"] = entropy_seed()
        print(f"seed: {data['seed']}", file=sys.stderr)
    if args.trace:
        data["trace"] = True
    try:
        scenario = sim.scenario_from_dict(data)
    except sim.ScenarioError as exc:
        print(f"simulate: bad scenario: {exc}", file=sys.stderr)
        return 2
    engine = sim.Simulation(scenario)
    status = 0
    try:
        metrics = engine.run()
    except sim.InvariantViolation as exc:
        print(f"simulate: invariant violated: {exc}", file=sys.stderr)
        for rec in exc.trace[-20:]:
            print(f"  {rec}", file=sys.stderr)
        metrics = engine.m
        status = 3
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(sim.TRACE_COLUMNS), lineterminator="\n")
            w.writeheader()
            w.writerows(sim.trace_rows(engine.trace))
    _emit(metrics.to_json() + "\n", _destination(args.out, f"metrics-{scenario.seed}.json", False))
    return status


def cmd_episodes(args) -> int:
    seed = args.seed
    if seed is None:
        seed = entropy_seed()
        print(f"seed: {seed}", file=sys.stderr)
    if args.count < 0 or args.contenders < 1:
        print("episodes: --count must be >= 0 and --contenders >= 1", file=sys.stderr)
        return 2
    r = sim.run_episodes(args.count, args.contenders, args.rate, seed, workers=args.workers)
    if r["count"]:
        lo, hi = r["compliance_ci95"]
        print(f"episodes            {r['count']}")
        print(f"deadline met        {r['deadline_met']} ({r['compliance']:.4%}, 95% CI {lo:.4%} .. {hi:.4%})")
        for key, label in (("latency_p50_s", "p50"), ("latency_p99_s", "p99"), ("latency_p999_s", "p99.9")):
            v = r[key]
            print(f"latency {label:<11} {'incomplete' if v is None else f'{v:.3f} s'}")
        print(f"recognition p99.9   {r['recognition_p999_s']:.3f} s")
        print(f"attempts per report {r['mean_attempts_per_report']:.3f}")
    else:
        print("episodes            0")
    dest = _destination(args.out, f"episodes-{seed}.json", False)
    if dest is not None:
        _emit(json.dumps(r, sort_keys=True, indent=1) + "\n", dest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfsense", description="HF sensor-network MAC analysis and simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="export analytic sweeps and tables as CSV", epilog=ANALYZE_EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    a.add_argument("--figure", choices=sorted(FIGURES), help="throughput sweep: 2a (vs packet length) or 2b (vs block length)")
    a.add_argument("--table", choices=sorted(TABLES), help="contention or capacity table")
    a.add_argument("--out", help="output file or directory")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run one scenario and write metrics JSON", epilog=SIMULATE_EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("scenario", help="scenario JSON file")
    s.add_argument("--seed", type=int, help="overrides the scenario seed; drawn from entropy and printed when neither is set")
    s.add_argument("--out", help="metrics JSON file or directory")
    s.add_argument("--trace", help="write the event log to this CSV file")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("episodes", help="batch of emergency episodes and deadline compliance", epilog=EPISODES_EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    e.add_argument("--count", type=int, default=1000, help="number of episodes (default 1000)")
    e.add_argument("--contenders", type=int, default=16, help="sensors detecting the event (default 16)")
    e.add_argument("--rate", choices=("worst", "fast"), default="worst", help="channel regime (default worst)")
    e.add_argument("--seed", type=int, help="batch seed; drawn from entropy and printed when omitted")
    e.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on this)")
    e.add_argument("--out", help="write the full summary JSON here")
    e.set_defaults(func=cmd_episodes)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
