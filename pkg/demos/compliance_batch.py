"""Deadline compliance over a batch of independent episodes.

Pass a count on the command line; the default of 200 runs in about ten
seconds.  The summary includes a 95% interval on the compliance fraction.
"""
import sys

from hfsense import sim

count = int(sys.argv[1]) if len(sys.argv) > 1 else 200
for rate in ("worst", "fast"):
    r = sim.run_episodes(count, 16, rate, seed=31)
    lo, hi = r["compliance_ci95"]
    print(f"{rate:5s}: {r['deadline_met']}/{r['count']} within 15 s  (95% CI {lo:.4f}-{hi:.4f})  "
          f"p50 {r['latency_p50_s']:.2f} s  p99 {r['latency_p99_s']:.2f} s  "
          f"attempts/report {r['mean_attempts_per_report']:.2f}")
