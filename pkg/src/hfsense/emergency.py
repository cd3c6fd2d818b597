"""Emergency contention, discovery, collection and deadline bookkeeping.

The server side is a small state machine driven by two callbacks per frame:
``on_uplink`` after the sensor region and ``on_contention`` after the
contention region.  Everything here is independent of the event loop so it
can be exercised directly in tests.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .codec import PacketGeometry, build_packets, half_geometry, parse_packets
from .mac import CONTENTION_SLOTS, HALF_SLOW_NS

DEADLINE_S = 15.0
DISCOVERY_PERIODS = 2
NS = 1_000_000_000


class Mode(str, enum.Enum):
    NORMAL = "normal"
    DISCOVERY = "discovery"
    COLLECTION = "collection"
    FINAL_POLL = "final_poll"


ALLOWED = {
    Mode.NORMAL: {Mode.DISCOVERY},
    Mode.DISCOVERY: {Mode.COLLECTION},
    Mode.COLLECTION: {Mode.FINAL_POLL},
    # a straggler heard in the final poll goes back to collection
    Mode.FINAL_POLL: {Mode.NORMAL, Mode.COLLECTION},
}


class EmergencyError(RuntimeError):
    pass


def contend(n_contenders: int, rng: np.random.Generator, n_slots: int = CONTENTION_SLOTS) -> np.ndarray:
    """Each contender picks one slot uniformly."""
    return rng.integers(0, n_slots, size=n_contenders)


def clean_slots(choices, n_slots: int = CONTENTION_SLOTS) -> np.ndarray:
    """Slots holding exactly one contender."""
    counts = np.bincount(np.asarray(choices, dtype=np.int64), minlength=n_slots)
    return np.flatnonzero(counts == 1)


def contention_words(addresses, geometry: PacketGeometry) -> np.ndarray:
    half = half_geometry(geometry)
    a = np.asarray(addresses, dtype=np.int64)
    return build_packets(half, a, np.zeros((a.size, 0), dtype=np.uint8))


def detect_trigger(received, geometry: PacketGeometry, known_addresses=None) -> list[int]:
    """Addresses recovered from a contention region.

    ``received`` is ``(k, 16)``: one row per slot that carried energy.  A
    slot counts only if its check passes and, when ``known_addresses`` is
    given, the address belongs to the deployment.  Triggered iff non-empty.
    """
    r = np.asarray(received, dtype=np.uint8)
    if r.size == 0:
        return []
    ok, addr, _ = parse_packets(r.reshape(-1, 16), half_geometry(geometry))
    out = []
    for good, a in zip(ok.tolist(), addr.tolist()):
        if not good:
            continue
        if known_addresses is not None and a not in known_addresses:
            continue
        if a not in out:
            out.append(a)
    return out


def false_trigger_bound(geometry: PacketGeometry, n_known: int) -> float:
    """Per-slot chance that uniform noise passes the check with a deployed address."""
    half = half_geometry(geometry)
    return 2.0 ** -half.crc_bits * n_known / (1 << half.address_bits)


def discovery_probability_mc(contenders: int, periods: int, trials: int, rng: np.random.Generator,
                             thin: bool = True, n_slots: int = CONTENTION_SLOTS) -> float:
    """Chance every contender is heard within the trigger frame plus ``periods`` more.

    Collisions only; a winner stays silent afterwards when ``thin`` is set.
    """
    hits = 0
    for _ in range(trials):
        left = contenders
        heard = 0
        for _ in range(periods + 1):
            if left == 0:
                break
            c = contend(left, rng, n_slots)
            won = clean_slots(c, n_slots).size
            heard += won
            if thin:
                left -= won
        if (left == 0) if thin else heard >= contenders:
            hits += 1
    return hits / trials


def worst_case_collection_s(reporters: int = 16, packets_per_report: float = 60.0,
                            positions: int = 5, per_frame: int = 16) -> float:
    """Frames to collect every report when each takes ``packets_per_report`` slots."""
    frames_each = packets_per_report / per_frame
    return math.ceil(reporters / positions) * frames_each


@dataclass
class EpisodeRecord:
    episode_id: int
    contenders: list
    detection_ns: dict
    deadline_s: float = DEADLINE_S
    trigger_ns: int | None = None
    trigger_frame: int | None = None
    discovered_ns: dict = field(default_factory=dict)
    scheduled_ns: dict = field(default_factory=dict)
    verified_ns: dict = field(default_factory=dict)
    attempts_to_delivery: dict = field(default_factory=dict)
    transmissions: dict = field(default_factory=dict)
    report_retransmits: int = 0
    phantoms: list = field(default_factory=list)
    close_ns: int | None = None
    contention_frames_to_trigger: int = 0
    final_polls: int = 0

    @property
    def first_detection_ns(self) -> int:
        return min(self.detection_ns.values())

    @property
    def complete(self) -> bool:
        return all(a in self.verified_ns for a in self.contenders)

    @property
    def all_verified_ns(self) -> int | None:
        if not self.complete or not self.contenders:
            return None
        return max(self.verified_ns[a] for a in self.contenders)

    @property
    def latency_s(self) -> float | None:
        """First detection to all reports verified."""
        t = self.all_verified_ns
        return None if t is None else (t - self.first_detection_ns) / NS

    @property
    def latency_with_close_s(self) -> float | None:
        if self.close_ns is None:
            return None
        return (self.close_ns - self.first_detection_ns) / NS

    @property
    def recognition_s(self) -> float | None:
        if self.trigger_ns is None:
            return None
        return (self.trigger_ns - self.first_detection_ns) / NS

    @property
    def collection_s(self) -> float | None:
        """Trigger to all reports verified, i.e. without the recognition time."""
        t = self.all_verified_ns
        if t is None or self.trigger_ns is None:
            return None
        return (t - self.trigger_ns) / NS

    @property
    def deadline_met(self) -> bool:
        lat = self.latency_s
        return lat is not None and lat <= self.deadline_s

    def discovered_within(self, periods: int = DISCOVERY_PERIODS) -> bool:
        if self.trigger_frame is None:
            return False
        limit = self.trigger_ns + periods * NS
        return all(self.discovered_ns.get(a, limit + 1) <= limit for a in self.contenders)

    def to_dict(self) -> dict:
        c = sorted(self.contenders)
        return {
            "episode_id": self.episode_id,
            "contenders": c,
            "detection_ns": [self.detection_ns[a] for a in c],
            "first_detection_ns": self.first_detection_ns,
            "trigger_ns": self.trigger_ns,
            "recognition_s": self.recognition_s,
            "verified_ns": [self.verified_ns.get(a) for a in c],
            "attempts_to_delivery": [self.attempts_to_delivery.get(a) for a in c],
            "transmissions": [self.transmissions.get(a) for a in c],
            "latency_s": self.latency_s,
            "collection_s": self.collection_s,
            "latency_with_close_s": self.latency_with_close_s,
            "close_ns": self.close_ns,
            "discovered_within_two_periods": self.discovered_within(),
            "report_retransmits": self.report_retransmits,
            "phantoms": sorted(self.phantoms),
            "final_polls": self.final_polls,
            "deadline_met": self.deadline_met,
        }


class EmergencyState:
    """Server-side emergency mode.

    ``queue`` holds heard reporters not yet scheduled; triggerers go first.
    ``acknowledged`` are addresses the server has told (or scheduled) so
    they stop contending.
    """

    def __init__(self, silent_limit: int = 3):
        self.mode = Mode.NORMAL
        self.history = [Mode.NORMAL]
        self.queue: deque = deque()
        self.heard: set = set()
        self.active: set = set()
        self.done: set = set()
        self.dropped: set = set()
        self.periods_left = 0
        self.record: EpisodeRecord | None = None
        self.silent_limit = silent_limit
        self.closed: list = []

    def _go(self, mode: Mode):
        if mode not in ALLOWED[self.mode]:
            raise EmergencyError(f"illegal transition {self.mode.value} -> {mode.value}")
        self.mode = mode
        self.history.append(mode)

    @property
    def emergency(self) -> bool:
        return self.mode is not Mode.NORMAL

    def _enqueue(self, addresses, t_ns: int):
        new = []
        for a in addresses:
            if a in self.heard:
                continue
            self.heard.add(a)
            self.dropped.discard(a)
            self.queue.append(a)
            new.append(a)
            if self.record is not None:
                self.record.discovered_ns.setdefault(a, t_ns)
        return new

    def on_contention(self, heard, t_ns: int, frame: int, record_factory=None) -> list:
        """Process one contention region; returns newly heard addresses."""
        heard = list(heard)
        if self.mode is Mode.NORMAL:
            if not heard:
                return []
            self._go(Mode.DISCOVERY)
            self.periods_left = DISCOVERY_PERIODS
            self.record = record_factory(t_ns, frame) if record_factory else None
            if self.record is not None and self.record.trigger_ns is None:
                self.record.trigger_ns = t_ns
                self.record.trigger_frame = frame
            return self._enqueue(heard, t_ns)
        new = self._enqueue(heard, t_ns)
        if self.mode is Mode.DISCOVERY:
            self.periods_left -= 1
            if self.periods_left == 0:
                self._go(Mode.COLLECTION)
                self._maybe_final_poll()
            return new
        if self.mode is Mode.FINAL_POLL:
            if self.record is not None:
                self.record.final_polls += 1
            if new:
                self._go(Mode.COLLECTION)
            else:
                self._close(t_ns)
        return new

    def _maybe_final_poll(self):
        if self.mode is Mode.COLLECTION and not self.queue and not self.active:
            self._go(Mode.FINAL_POLL)

    def _close(self, t_ns: int):
        self._go(Mode.NORMAL)
        if self.record is not None:
            self.record.close_ns = t_ns
            self.closed.append(self.record)
        self.record = None
        self.queue.clear()
        self.heard.clear()
        self.active.clear()
        self.done.clear()
        self.dropped.clear()

    def next_reporter(self):
        while self.queue:
            a = self.queue.popleft()
            if a not in self.done and a not in self.dropped:
                self.active.add(a)
                return a
        return None

    def on_scheduled(self, address: int, t_ns: int):
        if self.record is not None:
            self.record.scheduled_ns.setdefault(address, t_ns)

    def on_report_verified(self, address: int, t_ns: int, attempts: int | None = None,
                           transmissions: int | None = None):
        self.active.discard(address)
        self.done.add(address)
        if self.record is not None:
            self.record.verified_ns.setdefault(address, t_ns)
            if attempts is not None:
                self.record.attempts_to_delivery.setdefault(address, attempts)
            if transmissions is not None:
                self.record.transmissions.setdefault(address, transmissions)
        self._maybe_final_poll()

    def on_silent_reporter(self, address: int):
        """Drop a reporter that never sent or said it has nothing to send."""
        self.active.discard(address)
        self.dropped.add(address)
        # forget it, so a genuine sensor that keeps contending is heard afresh
        self.heard.discard(address)
        if (self.record is not None and address not in self.record.contenders
                and address not in self.record.phantoms):
            self.record.phantoms.append(address)
        self._maybe_final_poll()

    def uplink_done(self):
        self._maybe_final_poll()


def contention_send_offsets(choices, layout) -> np.ndarray:
    return layout.contention_offsets()[np.asarray(choices, dtype=np.int64)]


__all__ = [
    "DEADLINE_S",
    "DISCOVERY_PERIODS",
    "HALF_SLOW_NS",
    "Mode",
    "EmergencyError",
    "EmergencyState",
    "EpisodeRecord",
    "contend",
    "clean_slots",
    "contention_words",
    "contention_send_offsets",
    "detect_trigger",
    "discovery_probability_mc",
    "false_trigger_bound",
    "worst_case_collection_s",
]
