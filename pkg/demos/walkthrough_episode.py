"""One worst-case emergency followed frame by frame.

Sixteen sensors detect a shake at the same instant on a slow channel with
BER 1e-2.  The script prints when the server notices, how the contenders
get discovered and when each report is verified.
"""
import json

from hfsense import sim

sc = sim.episode_scenario(16, "worst", seed=2024, episodes=[1.37], trace=True)
s = sim.Simulation(sc)
m = s.run()
[ep] = m.episodes

t0 = ep["first_detection_ns"]
for row in sim.trace_rows(s.trace):
    if row["event"] in ("detection", "report_verified"):
        d = json.loads(row["detail"])
        print(f"{(int(row['t_ns']) - t0) / 1e9:7.3f} s  {row['event']:16s} {d}")

print()
print(f"recognised after {ep['recognition_s']:.2f} s")
print(f"all {len(ep['contenders'])} reports verified after {ep['latency_s']:.2f} s "
      f"(deadline {sc.deadline_s:.0f} s, met: {ep['deadline_met']})")
att = [a for a in ep["attempts_to_delivery"] if a is not None]
print(f"packet attempts per report: mean {sum(att) / len(att):.1f}, min {min(att)}, max {max(att)}")
