"""Abstract HF link: post-FEC bit errors, rate regimes, coherence-time fades, delay.

Time is integer nanoseconds throughout.  A single ``numpy`` generator owns
all bit-error draws of a run, so a fixed seed and call order reproduce the
exact same corruption.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import STREAM_FADES, substream

NS = 1_000_000_000
MS = 1_000_000
US = 1_000


class RateMode(enum.IntEnum):
    SLOW = 4096
    FAST = 40960

    @property
    def label(self) -> str:
        return self.name.lower()

    def duration_ns(self, n_bits: int) -> int:
        """Exact airtime of ``n_bits``; every multiple of 16 bits is a whole number of ns."""
        num = n_bits * NS
        if num % self.value:
            return -(-num // self.value)
        return num // self.value

    @classmethod
    def parse(cls, v) -> "RateMode":
        if isinstance(v, RateMode):
            return v
        if isinstance(v, str):
            return cls[v.upper()]
        return cls(int(v))


@dataclass
class RateProcess:
    """Two-state slow fading: exponential dwell times alternating slow/fast."""

    mean_dwell_s: float = 6 * 3600.0
    initial: str = "slow"

    def sample_schedule(self, horizon_s: float, rng: np.random.Generator) -> list[tuple[float, str]]:
        t, mode = 0.0, RateMode.parse(self.initial)
        out = [(0.0, mode.label)]
        while True:
            t += rng.exponential(self.mean_dwell_s)
            if t >= horizon_s:
                return out
            mode = RateMode.FAST if mode is RateMode.SLOW else RateMode.SLOW
            out.append((t, mode.label))


@dataclass
class ChannelParams:
    ber: float = 1e-2
    rate_schedule: list = field(default_factory=lambda: [(0.0, "slow")])
    rate_process: RateProcess | None = None
    degraded_ber: float = 0.2
    fade_doppler_hz: float = 10.0
    fade_event_rate: float = 0.0
    tof_max_s: float = 0.020
    tof_drift_rate: float = 0.0
    clock_drift_rate: float = 0.0

    @property
    def coherence_s(self) -> float:
        return 1.0 / (2.0 * self.fade_doppler_hz)

    @property
    def coherence_ns(self) -> int:
        return int(round(self.coherence_s * NS))


def rate_at(time_s: float, schedule) -> RateMode:
    """Mode the channel supports at ``time_s`` for a sorted ``[(start_s, mode), ...]`` schedule."""
    if isinstance(schedule, ChannelParams):
        schedule = schedule.rate_schedule
    starts = [float(t) for t, _ in schedule]
    i = bisect.bisect_right(starts, time_s) - 1
    if i < 0:
        raise ValueError(f"schedule does not cover t={time_s}")
    return RateMode.parse(schedule[i][1])


@dataclass
class ClockState:
    offset_ns: float = 0.0
    drift_rate: float = 0.0

    def offset_at(self, t_ns: int) -> float:
        return self.offset_ns + self.drift_rate * t_ns


@dataclass
class LinkState:
    sensor_id: int
    tof_ns: int
    tof_drift_rate: float = 0.0
    calibrated_tof_ns: int = 0

    def true_tof(self, t_ns: int) -> float:
        return self.tof_ns + self.tof_drift_rate * t_ns


class FadeProcess:
    """Poisson fade onsets of fixed (coherence-time) length, generated lazily in time order."""

    def __init__(self, rate_hz: float, duration_ns: int, rng: np.random.Generator):
        self.rate_hz = rate_hz
        self.duration_ns = duration_ns
        self.rng = rng
        self._events: list[int] = []
        self._horizon = 0

    def intervals(self, t0: int, t1: int) -> list[tuple[int, int]]:
        if self.rate_hz <= 0:
            return []
        while self._horizon < t1:
            gap = int(self.rng.exponential(1.0 / self.rate_hz) * NS)
            self._horizon += max(gap, 1)
            self._events.append(self._horizon)
        lo = bisect.bisect_left(self._events, t0 - self.duration_ns)
        return [(s, s + self.duration_ns) for s in self._events[lo:] if s < t1 and s + self.duration_ns > t0]


def flip_bits(words: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(p) flips: the flip count is binomial, the positions a uniform subset."""
    out = np.array(words, dtype=np.uint8, copy=True, order="C")
    if p <= 0 or out.size == 0:
        return out
    k = int(rng.binomial(out.size, p))
    if k:
        flat = out.reshape(-1)
        idx = rng.choice(out.size, size=k, replace=False)
        flat[idx] ^= 1
    return out


def fade_mask(start_ns: int, n_bits: int, mode: RateMode, intervals) -> np.ndarray:
    """Bits of a word starting at ``start_ns`` that overlap any fade interval."""
    mask = np.zeros(n_bits, dtype=bool)
    for f0, f1 in intervals:
        lo = math.floor((f0 - start_ns) * mode.value / NS)
        hi = math.ceil((f1 - start_ns) * mode.value / NS)
        lo, hi = max(lo, 0), min(hi, n_bits)
        if lo < hi:
            mask[lo:hi] = True
    return mask


class Channel:
    """The realized channel of one run."""

    def __init__(self, params: ChannelParams, rng: np.random.Generator, seed: int = 0,
                 horizon_s: float = 0.0):
        self.params = params
        self.rng = rng
        self.seed = seed
        schedule = params.rate_schedule
        if params.rate_process is not None:
            schedule = params.rate_process.sample_schedule(max(horizon_s, 1.0), rng)
        self.schedule = sorted([(float(t), RateMode.parse(m).label) for t, m in schedule])
        self._fades: dict[int, FadeProcess] = {}

    def rate_at(self, t_ns: int) -> RateMode:
        return rate_at(t_ns / NS, self.schedule)

    def ber_for(self, mode: RateMode, t_ns: int) -> float:
        if mode is RateMode.FAST and self.rate_at(t_ns) is RateMode.SLOW:
            return self.params.degraded_ber
        return self.params.ber

    def fades(self, link_id: int) -> FadeProcess:
        fp = self._fades.get(link_id)
        if fp is None:
            fp = FadeProcess(self.params.fade_event_rate, self.params.coherence_ns,
                             substream(self.seed, STREAM_FADES, link_id))
            self._fades[link_id] = fp
        return fp

    def _apply_fades(self, words: np.ndarray, starts_ns, mode: RateMode, link_id: int) -> np.ndarray:
        if self.params.fade_event_rate <= 0:
            return words
        n_bits = words.shape[-1]
        fp = self.fades(link_id)
        span = mode.duration_ns(n_bits)
        for i, s in enumerate(np.atleast_1d(starts_ns)):
            iv = fp.intervals(int(s), int(s) + span)
            if iv:
                m = fade_mask(int(s), n_bits, mode, iv)
                hits = m & (self.rng.random(n_bits) < 0.5)
                words[i] ^= hits.astype(np.uint8)
        return words

    def transmit(self, bits, start_ns: int, mode: RateMode, link: LinkState | None = None,
                 ber: float | None = None):
        """Send one word; returns ``(received_bits, arrival_ns)``."""
        w = np.asarray(bits, dtype=np.uint8)[None, :]
        rx = self.transmit_many(w, [start_ns], mode, link.sensor_id if link else -1, ber)[0]
        tof = link.true_tof(start_ns) if link else 0
        return rx, int(round(start_ns + tof))

    def transmit_many(self, words, starts_ns, mode: RateMode, link_id: int = -1,
                      ber: float | None = None) -> np.ndarray:
        """Corrupt ``(k, L)`` words sent on one link."""
        w = np.asarray(words, dtype=np.uint8)
        t0 = int(np.min(starts_ns)) if len(starts_ns) else 0
        p = self.ber_for(mode, t0) if ber is None else ber
        rx = flip_bits(w, p, self.rng)
        if link_id >= 0:
            rx = self._apply_fades(rx, starts_ns, mode, link_id)
        return rx

    def broadcast(self, words, starts_ns, mode: RateMode, receivers) -> np.ndarray:
        """Independent copies of ``(k, L)`` words at each receiver: shape ``(n_rx, k, L)``."""
        w = np.asarray(words, dtype=np.uint8)
        receivers = list(receivers)
        copies = np.broadcast_to(w, (len(receivers),) + w.shape)
        t0 = int(np.min(starts_ns)) if len(starts_ns) else 0
        rx = flip_bits(copies, self.ber_for(mode, t0), self.rng)
        if self.params.fade_event_rate > 0:
            for j, rid in enumerate(receivers):
                rx[j] = self._apply_fades(rx[j], starts_ns, mode, rid)
        return rx

    def overlap_collide(self, transmissions, tolerance_ns: int = 0):
        """Resolve simultaneous arrivals at the server.

        ``transmissions`` is a list of ``(arrival_ns, duration_ns, bits)``.
        Returns ``(received, collided)``: a word that overlaps any other by
        more than ``tolerance_ns`` arrives as uniformly random bits, a lone
        word passes through unchanged (apply :meth:`transmit_many` for its
        bit errors first).
        """
        n = len(transmissions)
        collided = np.zeros(n, dtype=bool)
        order = sorted(range(n), key=lambda i: transmissions[i][0])
        active_end, active_idx = -1, -1
        for i in order:
            start, dur, _ = transmissions[i]
            if start < active_end - tolerance_ns:
                collided[i] = True
                collided[active_idx] = True
                if start + dur > active_end:
                    active_end, active_idx = start + dur, i
            else:
                active_end, active_idx = start + dur, i
        received = []
        for i, (_, _, bits) in enumerate(transmissions):
            b = np.asarray(bits, dtype=np.uint8)
            if collided[i]:
                b = self.rng.integers(0, 2, size=b.shape, dtype=np.uint8)
            received.append(b)
        return received, collided
