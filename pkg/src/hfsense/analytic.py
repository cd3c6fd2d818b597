"""Closed-form throughput, error, contention and capacity figures.

Everything here is a pure function.  Probabilities are doubles; binomial
coefficients go through ``lgamma`` so long packets and blocks stay finite.
Contention probabilities are exact rationals from a dynamic program over
slots, with a seeded Monte-Carlo estimator for sizes beyond that budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .codec import (
    EMERGENCY_REPORT_BITS,
    HOURLY_REPORT_BITS,
    PacketGeometry,
    block_sizing,
    check_length,
    required_packets,
    sizing,
)

SLOW_RATE = 4096
FAST_RATE = 40960
DATA_SLOTS_PER_SECOND = {"slow": 80, "fast": 800}
EXACT_CONTENTION_LIMIT = 64
HOUR = 3600.0


class ContentionBudgetError(ValueError):
    """Exact enumeration refused; use :func:`contention_failure_mc` instead."""


@dataclass(frozen=True)
class ThroughputQuery:
    rate: float = SLOW_RATE
    packet_len: int = 32
    block_len: int = 512
    ber: float = 1e-2
    network_size: int = 1000

    def __post_init__(self):
        if not 0 <= self.ber < 1:
            raise ValueError(f"ber must be in [0, 1), got {self.ber}")


@dataclass(frozen=True)
class ContentionQuery:
    contenders: int = 16
    slots: int = 16


def packet_success_prob(packet_len: int, ber: float) -> float:
    """Probability that all ``packet_len`` bits survive: (1 - BER)^L."""
    if ber == 0:
        return 1.0
    return math.exp(packet_len * math.log1p(-ber))


def packet_throughput(q: ThroughputQuery) -> float:
    """Expected payload goodput in bits/s for single packets (zero if no payload fits)."""
    a = math.ceil(math.log2(q.network_size)) if q.network_size > 1 else 0
    payload = q.packet_len - check_length(q.packet_len) - a
    if payload <= 0:
        return 0.0
    return q.rate / q.packet_len * payload * packet_success_prob(q.packet_len, q.ber)


def undetected_error_prob(packet_len: int, ber: float) -> float:
    """Probability of an even number (>= 4) of flips: the patterns the check is not guaranteed to see."""
    if ber == 0:
        return 0.0
    lp, lq = math.log(ber), math.log1p(-ber)
    terms = []
    for k in range(2, packet_len // 2 + 1):
        w = 2 * k
        log_c = math.lgamma(packet_len + 1) - math.lgamma(w + 1) - math.lgamma(packet_len - w + 1)
        terms.append(math.exp(log_c + w * lp + (packet_len - w) * lq))
    return math.fsum(terms)


def undetected_error_terms(packet_len: int, ber: float) -> list[float]:
    """Per-weight contributions (4, 6, 8, ...) of :func:`undetected_error_prob`."""
    lp, lq = math.log(ber), math.log1p(-ber)
    out = []
    for k in range(2, packet_len // 2 + 1):
        w = 2 * k
        log_c = math.lgamma(packet_len + 1) - math.lgamma(w + 1) - math.lgamma(packet_len - w + 1)
        out.append(math.exp(log_c + w * lp + (packet_len - w) * lq))
    return out


def _payload_bits(q: ThroughputQuery) -> int:
    return q.packet_len - check_length(q.packet_len) - math.ceil(math.log2(q.network_size))


def block_throughput(q: ThroughputQuery) -> float:
    """Closed-form long-run goodput with per-block checks.

    ``I_b * (R / L_p) * (I_p (1-BER)^L_p / L_b) * (1 - P_u)^(L_b / I_p)``
    """
    ip = _payload_bits(q)
    if ip <= 0:
        return 0.0
    ib = q.block_len - check_length(q.block_len)
    ps = packet_success_prob(q.packet_len, q.ber)
    pu = undetected_error_prob(q.packet_len, q.ber)
    return ib * (q.rate / q.packet_len) * (ip * ps / q.block_len) * (1 - pu) ** (q.block_len / ip)


def block_retransmit_prob(packet_len: int = 32, ber: float = 1e-2, packets_per_block: int = 32) -> float:
    """Chance a block carries at least one undetected packet error."""
    return 1 - (1 - undetected_error_prob(packet_len, ber)) ** packets_per_block


def expected_packets_per_report(report_bits: int, geometry: PacketGeometry | None = None,
                                ber: float = 1e-2, block_len: int = 512,
                                kind: str | None = None) -> float:
    geometry = geometry or sizing(1000, 32)
    need = required_packets(report_bits, block_sizing(block_len, geometry), geometry, kind)
    return need / packet_success_prob(geometry.packet_len, ber)


def ber_drop(packet_len: int, block_len: int = 512, ber_lo: float = 1e-2, ber_hi: float = 1.1e-2,
             rate: float = SLOW_RATE, network_size: int = 1000) -> float:
    """Relative loss of block throughput when BER rises from ``ber_lo`` to ``ber_hi``."""
    base = ThroughputQuery(rate, packet_len, block_len, ber_lo, network_size)
    lo = block_throughput(base)
    hi = block_throughput(replace(base, ber=ber_hi))
    return 1 - hi / lo


# --- contention -----------------------------------------------------------

def contention_expected_successes(m: int, n: int) -> float:
    """Expected number of slots holding exactly one of ``m`` uniform throws into ``n`` slots."""
    if m == 0:
        return 0.0
    return m * (1 - 1 / n) ** (m - 1)


def _check_budget(m: int, n: int):
    if m < 0 or n < 1:
        raise ValueError(f"need m >= 0 and n >= 1, got m={m}, n={n}")
    if m > EXACT_CONTENTION_LIMIT or n > EXACT_CONTENTION_LIMIT:
        raise ContentionBudgetError(
            f"exact enumeration is limited to m, n <= {EXACT_CONTENTION_LIMIT}; "
            "use contention_failure_mc for larger instances")


@lru_cache(maxsize=None)
def _inv_factorials(m: int) -> tuple:
    return tuple(Fraction(1, math.factorial(k)) for k in range(m + 1))


@lru_cache(maxsize=None)
def contention_failure_exact(m: int, n: int) -> Fraction:
    """P(no slot holds exactly one contender), as an exact rational.

    Slot-by-slot DP over balls used so far, weighting each slot's load k by
    1/k! (multinomial counting) and skipping k = 1.
    """
    _check_budget(m, n)
    if m == 0:
        return Fraction(1)
    inv = _inv_factorials(m)
    f = [Fraction(0)] * (m + 1)
    f[0] = Fraction(1)
    for _ in range(n):
        g = [Fraction(0)] * (m + 1)
        for j, v in enumerate(f):
            if not v:
                continue
            g[j] += v
            for k in range(2, m - j + 1):
                g[j + k] += v * inv[k]
        f = g
    return f[m] * math.factorial(m) / Fraction(n) ** m


def contention_failure_prob(m: int, n: int) -> float:
    return float(contention_failure_exact(m, n))


@lru_cache(maxsize=None)
def singleton_distribution(m: int, n: int) -> tuple:
    """Exact distribution of the number of singleton slots (index = count)."""
    _check_budget(m, n)
    inv = _inv_factorials(m)
    smax = min(m, n)
    # state[j][s]: weight of having placed j balls with s singletons
    state = [[Fraction(0)] * (smax + 1) for _ in range(m + 1)]
    state[0][0] = Fraction(1)
    for _ in range(n):
        nxt = [[Fraction(0)] * (smax + 1) for _ in range(m + 1)]
        for j in range(m + 1):
            row = state[j]
            for s, v in enumerate(row):
                if not v:
                    continue
                nxt[j][s] += v
                if j + 1 <= m and s + 1 <= smax:
                    nxt[j + 1][s + 1] += v
                for k in range(2, m - j + 1):
                    nxt[j + k][s] += v * inv[k]
        state = nxt
    scale = math.factorial(m) / Fraction(n) ** m
    return tuple(v * scale for v in state[m])


def contention_failure_mc(m: int, n: int, trials: int, seed: int = 0,
                          chunk: int = 1_000_000) -> tuple[float, float]:
    """Monte-Carlo P(no singleton slot): returns ``(estimate, standard_error)``."""
    rng = np.random.default_rng(seed)
    fails = 0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        throws = rng.integers(0, n, size=(b, m), dtype=np.int16)
        singles = np.zeros(b, dtype=bool)
        for s in range(n):
            singles |= (throws == s).sum(axis=1) == 1
        fails += int(b - singles.sum())
        done += b
    p = fails / trials
    return p, math.sqrt(max(p * (1 - p), 1 / trials) / trials)


# --- capacity -------------------------------------------------------------

def seconds_per_user(mode: str, ber: float = 1e-2, geometry: PacketGeometry | None = None) -> float:
    """Channel seconds one hourly report occupies in ``mode`` ('slow' or 'fast')."""
    if mode not in DATA_SLOTS_PER_SECOND:
        raise ValueError(f"mode must be 'slow' or 'fast', got {mode!r}")
    return expected_packets_per_report(HOURLY_REPORT_BITS, geometry, ber) / DATA_SLOTS_PER_SECOND[mode]


def capacity_users(mode: str, ber: float = 1e-2, geometry: PacketGeometry | None = None) -> int:
    """Whole sensors whose hourly reports fit in an hour; 'mixed' averages slow and fast."""
    if mode == "mixed":
        slow = HOUR / seconds_per_user("slow", ber, geometry)
        fast = HOUR / seconds_per_user("fast", ber, geometry)
        return int((slow + fast) / 2)
    return int(HOUR / seconds_per_user(mode, ber, geometry))


# --- tables ---------------------------------------------------------------

def packet_length_sweep(ber: float = 1e-2, rate: float = SLOW_RATE, network_size: int = 1000,
               lengths=range(8, 4097)) -> list[dict]:
    rows = []
    for lp in lengths:
        q = ThroughputQuery(rate, lp, 512, ber, network_size)
        rows.append({
            "packet_len": lp,
            "power_of_two": int(lp & (lp - 1) == 0),
            "throughput_bps": packet_throughput(q),
        })
    return rows


def block_length_sweep(packet_lens=(32, 64), bers=(1e-2, 1.1e-2), block_lens=None,
               rate: float = SLOW_RATE, network_size: int = 1000) -> list[dict]:
    block_lens = block_lens or [2 ** k for k in range(6, 14)]
    rows = []
    for lp in packet_lens:
        for ber in bers:
            for lb in block_lens:
                q = ThroughputQuery(rate, lp, lb, ber, network_size)
                rows.append({"packet_len": lp, "ber": ber, "block_len": lb,
                             "throughput_bps": block_throughput(q)})
    return rows


def contention_rows(pairs=((16, 16), (2, 16), (1, 16), (16, 8), (16, 32))) -> list[dict]:
    rows = []
    for m, n in pairs:
        rows.append({
            "contenders": m,
            "slots": n,
            "expected_successes": contention_expected_successes(m, n),
            "failure_prob": contention_failure_prob(m, n),
        })
    return rows


def capacity_rows(ber: float = 1e-2) -> list[dict]:
    rows = []
    for mode in ("slow", "fast", "mixed"):
        spu = "" if mode == "mixed" else seconds_per_user(mode, ber)
        rows.append({"mode": mode, "users": capacity_users(mode, ber), "seconds_per_user": spu})
    return rows


def emergency_packets_per_report(ber: float = 1e-2, geometry: PacketGeometry | None = None) -> float:
    return expected_packets_per_report(EMERGENCY_REPORT_BITS, geometry, ber, kind="emergency")
