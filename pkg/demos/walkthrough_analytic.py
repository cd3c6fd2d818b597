"""Closed-form numbers behind the protocol design, printed in the order they build on each other."""
from hfsense import analytic
from hfsense.codec import HOURLY_REPORT_BITS

BER = 1e-2

rows = analytic.packet_length_sweep(BER)
pow2 = [r for r in rows if r["power_of_two"]]
print("throughput at BER 1e-2, 4096 bit/s, 1000 sensors")
for r in pow2[:6]:
    print(f"  {r['packet_len']:5d} bits  {r['throughput_bps']:8.1f} bit/s")
best = max(pow2, key=lambda r: r["throughput_bps"])
print(f"best power of two: {best['packet_len']} bits\n")

ps = analytic.packet_success_prob(32, BER)
pu = analytic.undetected_error_prob(32, BER)
print(f"32-bit packet arrives clean: {ps:.4f}")
print(f"32-bit packet corrupted in a way the check may miss: {pu:.3e}")
print(f"block of 32 packets needs resending: 1 in {1 / analytic.block_retransmit_prob():.0f}")
print(f"packets sent per hourly report: {analytic.expected_packets_per_report(HOURLY_REPORT_BITS):.1f}")
print(f"packets sent per emergency report: {analytic.emergency_packets_per_report(BER):.1f}\n")

for r in analytic.contention_rows():
    print(f"{r['contenders']:2d} contenders in {r['slots']:2d} slots: "
          f"no clean slot with probability {r['failure_prob']:.3e}")
print()
for r in analytic.capacity_rows():
    print(f"{r['mode']:5s} rate supports {r['users']} sensors")
print()
for lp in (32, 64):
    print(f"{lp}-bit packets lose {analytic.ber_drop(lp):.2%} of block throughput when BER goes 1.0% -> 1.1%")
