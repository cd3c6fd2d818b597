import itertools
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfsense import analytic as an

# frozen from exact rational arithmetic (see _exact_* below)
SUCCESS_32 = 0.7249803359578536
UNDETECTED_32 = 0.0002720956895339832
FAIL_16_16 = 0.0005134533800678492


def _exact_success(length, p):
    return (1 - p) ** length


def _exact_undetected(length, p):
    return sum(math.comb(length, w) * p ** w * (1 - p) ** (length - w) for w in range(4, length + 1, 2))


def _no_singleton(m, n):
    # inclusion-exclusion over slots forced to hold exactly one contender
    total = sum((-1) ** k * math.comb(n, k) * math.perm(m, k) * (n - k) ** (m - k)
                for k in range(min(m, n) + 1))
    return Fraction(total, n ** m)


def _brute_no_singleton(m, n):
    bad = 0
    for throw in itertools.product(range(n), repeat=m):
        counts = [throw.count(s) for s in range(n)]
        bad += 1 not in counts
    return Fraction(bad, n ** m)


def test_frozen_oracles_are_what_exact_arithmetic_gives():
    p = Fraction(1, 100)
    assert float(_exact_success(32, p)) == pytest.approx(SUCCESS_32, rel=1e-15)
    assert float(_exact_undetected(32, p)) == pytest.approx(UNDETECTED_32, rel=1e-15)
    assert float(_no_singleton(16, 16)) == pytest.approx(FAIL_16_16, rel=1e-15)


def test_packet_success():
    assert an.packet_success_prob(32, 1e-2) == pytest.approx(SUCCESS_32, rel=1e-9)
    assert an.packet_success_prob(32, 0) == 1.0


def test_undetected():
    assert an.undetected_error_prob(32, 1e-2) == pytest.approx(UNDETECTED_32, rel=1e-9)
    assert an.undetected_error_prob(32, 0) == 0.0
    assert math.fsum(an.undetected_error_terms(32, 1e-2)) == pytest.approx(UNDETECTED_32, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(length=st.sampled_from([8, 16, 32, 64, 128]), ber=st.floats(1e-5, 0.2))
def test_undetected_matches_binomial_sum(length, ber):
    assert an.undetected_error_prob(length, ber) == pytest.approx(
        float(_exact_undetected(length, Fraction(ber))), rel=1e-9, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(ber=st.floats(1e-6, 0.4), extra=st.integers(1, 100))
def test_success_falls_with_length(ber, extra):
    assert an.packet_success_prob(32 + extra, ber) < an.packet_success_prob(32, ber)


@pytest.mark.parametrize("m,n", [(0, 3), (1, 4), (2, 2), (3, 3), (4, 3), (5, 4), (3, 6), (6, 2)])
def test_contention_exact_matches_enumeration(m, n):
    assert an.contention_failure_exact(m, n) == _brute_no_singleton(m, n)


@pytest.mark.parametrize("m,n", [(16, 16), (16, 8), (16, 32), (30, 20), (64, 64)])
def test_contention_exact_matches_inclusion_exclusion(m, n):
    assert an.contention_failure_exact(m, n) == _no_singleton(m, n)


def test_contention_baseline():
    assert an.contention_failure_prob(16, 16) == pytest.approx(FAIL_16_16, rel=1e-12)
    assert an.contention_failure_exact(2, 16) == Fraction(1, 16)
    assert an.contention_failure_exact(1, 16) == 0


@settings(max_examples=40, deadline=None)
@given(m=st.integers(0, 12), n=st.integers(1, 12))
def test_singleton_distribution_is_a_distribution(m, n):
    dist = an.singleton_distribution(m, n)
    assert sum(dist) == 1
    assert all(v >= 0 for v in dist)
    assert dist[0] == an.contention_failure_exact(m, n)
    mean = sum(k * v for k, v in enumerate(dist))
    assert float(mean) == pytest.approx(an.contention_expected_successes(m, n), rel=1e-9, abs=1e-12)


def test_contention_budget():
    with pytest.raises(an.ContentionBudgetError):
        an.contention_failure_exact(65, 16)
    with pytest.raises(ValueError):
        an.contention_failure_exact(3, 0)


def test_contention_mc_agrees():
    p, se = an.contention_failure_mc(4, 4, 200_000, seed=1)
    assert abs(p - float(_no_singleton(4, 4))) < 3 * se


def test_block_retransmit_and_report_cost():
    assert an.block_retransmit_prob() == pytest.approx(1 - (1 - UNDETECTED_32) ** 32, rel=1e-12)
    assert an.expected_packets_per_report(10240) == pytest.approx(672 / SUCCESS_32, rel=1e-12)
    assert an.emergency_packets_per_report() == pytest.approx(32 / SUCCESS_32, rel=1e-12)


def test_capacity():
    spu = 672 / SUCCESS_32 / 80
    assert an.seconds_per_user("slow") == pytest.approx(spu, rel=1e-12)
    assert an.seconds_per_user("fast") == pytest.approx(spu / 10, rel=1e-12)
    assert an.capacity_users("slow") == int(3600 / spu) == 310
    assert an.capacity_users("fast") == int(36000 / spu) == 3107
    assert an.capacity_users("mixed") == int((3600 / spu + 36000 / spu) / 2) == 1708
    with pytest.raises(ValueError):
        an.seconds_per_user("medium")


def _throughput(lp, ber=1e-2, rate=4096, n=1000):
    payload = lp - math.ceil(math.log2(lp) + 1) - math.ceil(math.log2(n))
    return max(payload, 0) * rate / lp * (1 - ber) ** lp


def test_packet_length_sweep():
    rows = an.packet_length_sweep()
    assert [r["packet_len"] for r in rows] == list(range(8, 4097))
    for r in rows[::97]:
        assert r["throughput_bps"] == pytest.approx(_throughput(r["packet_len"]), rel=1e-9, abs=1e-12)
    pow2 = [r for r in rows if r["power_of_two"]]
    assert max(pow2, key=lambda r: r["throughput_bps"])["packet_len"] == 64
    by_len = {r["packet_len"]: r["throughput_bps"] for r in rows}
    gap = 1 - by_len[32] / by_len[64]
    assert 0.04 <= gap <= 0.08


def _block(lp, lb, ber):
    ip = lp - math.ceil(math.log2(lp) + 1) - 10
    ib = lb - math.ceil(math.log2(lb) + 1)
    ps = (1 - ber) ** lp
    pu = float(_exact_undetected(lp, Fraction(ber)))
    return ib * (4096 / lp) * (ip * ps / lb) * (1 - pu) ** (lb / ip)


def test_block_length_sweep():
    rows = an.block_length_sweep()
    assert len(rows) == 2 * 2 * 8
    for r in rows:
        assert r["throughput_bps"] == pytest.approx(_block(r["packet_len"], r["block_len"], r["ber"]), rel=1e-9)


def test_ber_drop_ordering():
    lo32, lo64 = an.ber_drop(32), an.ber_drop(64)
    assert lo32 == pytest.approx(1 - _block(32, 512, 1.1e-2) / _block(32, 512, 1e-2), rel=1e-9)
    assert 1.5 < lo64 / lo32 < 3


def test_query_rejects_bad_ber():
    with pytest.raises(ValueError):
        an.ThroughputQuery(ber=1.0)


def test_tables():
    cont = {(r["contenders"], r["slots"]): r for r in an.contention_rows()}
    assert cont[(16, 16)]["failure_prob"] == pytest.approx(FAIL_16_16, rel=1e-12)
    assert cont[(2, 16)]["failure_prob"] == 1 / 16
    cap = {r["mode"]: r["users"] for r in an.capacity_rows()}
    assert cap == {"slow": 310, "fast": 3107, "mixed": 1708}
