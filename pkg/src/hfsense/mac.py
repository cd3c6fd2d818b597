"""Frame layouts, server broadcasts, schedule/ACK decoding and the control sub-protocol.

A frame is one second.  Slow frames have 128 slots of 7,812,500 ns, fast
frames 1280 slots of 781,250 ns.  Slot indices below are absolute within
the frame; a region is an inclusive slot range.
"""

from __future__ import annotations

import binascii
import enum
import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .channel import NS, RateMode
from .codec import (
    PacketGeometry,
    bits_to_int,
    build_packet,
    build_packets,
    half_geometry,
    int_to_bits,
    parse_packets,
)

FRAME_NS = NS
SLOW_SLOT_NS = 7_812_500
FAST_SLOT_NS = 781_250
HALF_SLOW_NS = SLOW_SLOT_NS // 2
POSITIONS = 5
CONTENTION_SLOTS = 16
TOF_TICK_NS = 5_000
ARG_BITS = 13
PROBE_THRESHOLD = 0.3
WHOLE_REPORT = 0xFFF
BLOCK_FLAG = 1 << 12

# first-slot patterns, all sent at the slow rate
INDICATOR_SLOW = 0x00000000
INDICATOR_FAST = 0xFFFFFFFF
INDICATOR_PROBE = 0x0000FFFF


class MacError(ValueError):
    pass


class Region(str, enum.Enum):
    INDICATOR = "indicator"
    CONTROL = "control"
    HEARTBEAT = "heartbeat"
    BROADCAST = "schedule_ack"
    SCHEDULE = "schedule"
    SETTLE = "settle"
    SENSOR = "sensor"
    DATA = "data"
    REPLY = "reply"
    CONTENTION = "contention"
    GAP = "gap"
    IDLE = "idle"


@dataclass(frozen=True)
class RegionSpan:
    kind: Region
    start: int
    end: int
    rate: RateMode

    @property
    def slots(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class FrameLayout:
    mode: RateMode
    slot_ns: int
    slot_count: int
    regions: tuple

    def region(self, kind: Region) -> RegionSpan:
        for r in self.regions:
            if r.kind is kind:
                return r
        raise KeyError(kind)

    def slot_start(self, slot: int) -> int:
        return slot * self.slot_ns

    def total_ns(self) -> int:
        return sum(r.slots * self.slot_ns for r in self.regions)

    def contention_offsets(self) -> np.ndarray:
        """Start offsets of the 16 slow-rate contention half-slots."""
        start = self.region(Region.CONTENTION).start * self.slot_ns
        return start + HALF_SLOW_NS * np.arange(CONTENTION_SLOTS, dtype=np.int64)

    def contention_window(self) -> tuple[int, int]:
        r = self.region(Region.CONTENTION)
        return r.start * self.slot_ns, (r.end + 1) * self.slot_ns

    @property
    def packets_per_position(self) -> int:
        return 16 if self.mode is RateMode.SLOW else 160

    @property
    def ack_words_per_position(self) -> int:
        return self.packets_per_position // 16

    def data_slots(self, position: int) -> np.ndarray:
        if self.mode is RateMode.SLOW:
            return SLOW_DATA_SLOTS[position::POSITIONS]
        return 132 + POSITIONS * np.arange(160) + position

    def reply_slots(self) -> np.ndarray:
        if self.mode is RateMode.SLOW:
            return np.array(SLOW_REPLY_SLOTS)
        return np.arange(932, 1002)

    @property
    def sensor_region_end_ns(self) -> int:
        kind = Region.SENSOR if self.mode is RateMode.SLOW else Region.REPLY
        return (self.region(kind).end + 1) * self.slot_ns

    def rows(self) -> list[dict]:
        return [{"mode": self.mode.label, "region": r.kind.value, "start_slot": r.start,
                 "end_slot": r.end, "rate": r.rate.label,
                 "start_ns": r.start * self.slot_ns, "end_ns": (r.end + 1) * self.slot_ns}
                for r in self.regions]


S, F = RateMode.SLOW, RateMode.FAST

SLOW_LAYOUT = FrameLayout(S, SLOW_SLOT_NS, 128, (
    RegionSpan(Region.INDICATOR, 0, 0, S),
    RegionSpan(Region.CONTROL, 1, 4, S),
    RegionSpan(Region.BROADCAST, 5, 24, S),
    RegionSpan(Region.SETTLE, 25, 27, S),
    RegionSpan(Region.SENSOR, 28, 111, S),
    RegionSpan(Region.CONTENTION, 112, 119, S),
    RegionSpan(Region.SETTLE, 120, 122, S),
    RegionSpan(Region.IDLE, 123, 127, S),
))

FAST_LAYOUT = FrameLayout(F, FAST_SLOT_NS, 1280, (
    RegionSpan(Region.INDICATOR, 0, 9, S),
    RegionSpan(Region.HEARTBEAT, 10, 29, S),
    RegionSpan(Region.GAP, 30, 30, F),
    RegionSpan(Region.SCHEDULE, 31, 35, F),
    RegionSpan(Region.CONTROL, 36, 105, F),
    RegionSpan(Region.SETTLE, 106, 131, F),
    RegionSpan(Region.DATA, 132, 931, F),
    RegionSpan(Region.REPLY, 932, 1001, F),
    RegionSpan(Region.GAP, 1002, 1002, F),
    RegionSpan(Region.CONTENTION, 1003, 1082, S),
    RegionSpan(Region.SETTLE, 1083, 1112, F),
    RegionSpan(Region.IDLE, 1113, 1279, F),
))

SLOW_REPLY_SLOTS = (48, 69, 90, 111)
SLOW_DATA_SLOTS = np.array([s for s in range(28, 112) if s not in SLOW_REPLY_SLOTS])
# data indices displaced by probe digests (absolute slow slots 97..104)
PROBE_SLOW_SLOTS = tuple(range(97, 105))
PROBE_DATA_INDICES = tuple(int(np.flatnonzero(SLOW_DATA_SLOTS == s)[0]) for s in PROBE_SLOW_SLOTS)
PROBE_DIGESTS = 10 * len(PROBE_SLOW_SLOTS)
PROBE_TESTS = 40

# slow broadcast region, in half-slot units from slot 5
_SCHED_COPY_UNITS = ((0, 1, 2, 3, 4), (15, 16, 17, 18, 19))
_ACK_COPY_UNITS = ((5, 7, 9, 11, 13), (20, 22, 24, 26, 28), (30, 32, 34, 36, 38))

FAST_ACK_WORDS = POSITIONS * 10
FAST_CONTROL_SLOTS = 70


def layout_for(mode) -> FrameLayout:
    return SLOW_LAYOUT if RateMode.parse(mode) is RateMode.SLOW else FAST_LAYOUT


def layout_table() -> list[dict]:
    return SLOW_LAYOUT.rows() + FAST_LAYOUT.rows()


def probe_displaced(position: int) -> np.ndarray:
    """Which of a position's 16 slow data packets the probe digests displace."""
    idx = np.arange(16) * POSITIONS + position
    return np.isin(idx, PROBE_DATA_INDICES)


# --- control words --------------------------------------------------------

class Opcode(enum.IntEnum):
    RETRANSMIT_REQUEST = 0
    TOF_CALIBRATE = 1
    HEALTH_CHECK = 2
    RATE_PROBE = 3
    SOFTWARE_UPDATE = 4
    EMERGENCY_NOTICE = 5


@dataclass(frozen=True)
class ControlCommand:
    opcode: Opcode
    argument: int = 0

    def __post_init__(self):
        if not 0 <= self.argument < (1 << ARG_BITS):
            raise MacError(f"argument {self.argument} does not fit {ARG_BITS} bits")

    def encode(self) -> int:
        return (int(self.opcode) << ARG_BITS) | self.argument

    @classmethod
    def decode(cls, word: int) -> "ControlCommand | None":
        op = word >> ARG_BITS
        if op not in Opcode._value2member_map_:
            return None
        return cls(Opcode(op), word & ((1 << ARG_BITS) - 1))


def encode_tof_delta(delta_ns: float) -> int:
    """Signed 13-bit count of 5 us ticks (two's complement)."""
    ticks = int(round(delta_ns / TOF_TICK_NS))
    lim = 1 << (ARG_BITS - 1)
    ticks = max(-lim, min(lim - 1, ticks))
    return ticks & ((1 << ARG_BITS) - 1)


def decode_tof_delta(arg: int) -> int:
    if arg >= 1 << (ARG_BITS - 1):
        arg -= 1 << ARG_BITS
    return arg * TOF_TICK_NS


def retransmit_argument(index: int | None = None, block: int | None = None) -> int:
    if index is None and block is None:
        return WHOLE_REPORT
    if block is not None:
        return BLOCK_FLAG | block
    return index


def parse_retransmit(arg: int) -> tuple[str, int]:
    if arg == WHOLE_REPORT:
        return "report", -1
    if arg & BLOCK_FLAG:
        return "block", arg & 0xFFF
    return "packet", arg


# --- sealing --------------------------------------------------------------

class ToySeal:
    """Keyed 16-bit permutation: four Feistel rounds over 8-bit halves.

    Stands in for real public-key sealing; anything with the same
    ``seal``/``unseal`` pair can replace it.
    """

    rounds = 4

    @staticmethod
    @lru_cache(maxsize=1 << 16)
    def _f(key: bytes, rnd: int, half: int) -> int:
        return hashlib.blake2b(bytes([rnd, half]), key=key, digest_size=1).digest()[0]

    def seal(self, key: bytes, word: int) -> int:
        left, right = word >> 8, word & 0xFF
        for r in range(self.rounds):
            left, right = right, left ^ self._f(key, r, right)
        return (left << 8) | right

    def unseal(self, key: bytes, word: int) -> int:
        left, right = word >> 8, word & 0xFF
        for r in reversed(range(self.rounds)):
            left, right = right ^ self._f(key, r, left), left
        return (left << 8) | right


def sensor_key(seed: int, address: int) -> bytes:
    return hashlib.blake2b(f"sensor:{seed}:{address}".encode(), digest_size=16).digest()


def server_key(seed: int) -> bytes:
    return hashlib.blake2b(f"server:{seed}".encode(), digest_size=16).digest()


@dataclass(frozen=True)
class HeartbeatExchange:
    address: int
    command: ControlCommand
    sealed: int
    expected_reply: int

    @classmethod
    def create(cls, address, command: ControlCommand, skey: bytes, srv_key: bytes,
               seal: ToySeal | None = None) -> "HeartbeatExchange":
        seal = seal or ToySeal()
        word = command.encode()
        return cls(address, command, seal.seal(skey, word), seal.seal(srv_key, word))


def sensor_respond(sealed: int, skey: bytes, srv_key: bytes, seal: ToySeal | None = None):
    """What the sensor does with a control payload: ``(command, reply_payload)``."""
    seal = seal or ToySeal()
    word = seal.unseal(skey, sealed)
    return ControlCommand.decode(word), seal.seal(srv_key, word)


def verify_reply(rx_bits, geometry: PacketGeometry, exchange: HeartbeatExchange) -> bool:
    ok, addr, pay = parse_packets(np.asarray(rx_bits, dtype=np.uint8)[None, :], geometry)
    return bool(ok[0]) and int(addr[0]) == exchange.address and bits_to_int(pay[0]) == exchange.expected_reply


def heartbeat_roundtrip(command: ControlCommand, address: int, skey: bytes, srv_key: bytes,
                        geometry: PacketGeometry, channel=None, t_ns: int = 0,
                        mode: RateMode = RateMode.SLOW) -> bool:
    """One sealed command and its echo over ``channel`` (noiseless if ``None``)."""
    ex = HeartbeatExchange.create(address, command, skey, srv_key)
    down = build_packet(geometry, address, int_to_bits(ex.sealed, 16))
    if channel is not None:
        down = channel.transmit_many(down[None, :], [t_ns], mode, address)[0]
    ok, addr, pay = parse_packets(down[None, :], geometry)
    if not ok[0] or int(addr[0]) != address:
        return False
    cmd, reply = sensor_respond(bits_to_int(pay[0]), skey, srv_key)
    if cmd is None:
        return False
    up = build_packet(geometry, address, int_to_bits(reply, 16))
    if channel is not None:
        up = channel.transmit_many(up[None, :], [t_ns], mode, address)[0]
    return verify_reply(up, geometry, ex)


# --- probe digests --------------------------------------------------------

def probe_digest(data_bits) -> int:
    """16-bit digest (CRC-16/CCITT) of a test packet's address and payload bits."""
    v = bits_to_int(data_bits)
    nbytes = (len(np.asarray(data_bits)) + 7) // 8
    return binascii.crc_hqx(v.to_bytes(nbytes, "big"), 0xFFFF)


def probe_digests(words, geometry: PacketGeometry) -> np.ndarray:
    w = np.asarray(words, dtype=np.uint8)[:, : geometry.data_bits]
    return np.array([probe_digest(row) for row in w], dtype=np.int64)


def probe_verdict(successes: int, total: int, threshold: float = PROBE_THRESHOLD) -> str:
    if total == 0:
        return "stay_slow"
    return "fit_for_fast" if successes / total >= threshold else "stay_slow"


# --- broadcast ------------------------------------------------------------

@dataclass
class Emission:
    offset_ns: int
    rate: RateMode
    bits: np.ndarray
    kind: str
    entry: int = 0
    copy: int = 0
    address: int = -1


@dataclass
class BroadcastPlan:
    """Everything the server sends in one frame, plus bookkeeping for the receivers."""

    mode: RateMode
    probe: bool
    emissions: list = field(default_factory=list)

    def of_kind(self, kind: str) -> list:
        return [e for e in self.emissions if e.kind == kind]

    def stacked(self, kind: str):
        es = self.of_kind(kind)
        if not es:
            return es, None
        return es, np.stack([e.bits for e in es])


def indicator_bits(mode: RateMode, probe: bool = False) -> np.ndarray:
    if probe:
        return int_to_bits(INDICATOR_PROBE, 32)
    return int_to_bits(INDICATOR_SLOW if mode is RateMode.SLOW else INDICATOR_FAST, 32)


def decode_indicator(bits) -> tuple[RateMode, bool]:
    """Nearest of the three first-slot patterns: ``(mode, probe_frame)``."""
    b = np.asarray(bits, dtype=np.int64)
    d = [int(np.sum(b != int_to_bits(p, 32))) for p in (INDICATOR_SLOW, INDICATOR_FAST, INDICATOR_PROBE)]
    i = int(np.argmin(d))
    return (RateMode.FAST if i == 1 else RateMode.SLOW), i == 2


def build_server_broadcast(frame_index: int, schedule, acks, controls, mode,
                           geometry: PacketGeometry, probe: bool = False,
                           heartbeats=(), tests=(), broadcast_address: int | None = None) -> BroadcastPlan:
    """Lay out one frame's server transmissions.

    ``schedule``: five addresses (``None`` leaves a position empty).
    ``acks``: ``(address, word16)`` per position for slow frames, ten per
    position (position-major) for fast ones; ``None`` entries are skipped.
    ``controls``: ``(address, payload16)``; at most 4 slow or
    ``70 - acks - tests`` fast.  ``heartbeats``: at most 2, fast only, sent
    at the slow rate.  ``tests``: ``(address, payload16)`` probe or monitor
    test packets.
    """
    mode = RateMode.parse(mode)
    lay = layout_for(mode)
    half = half_geometry(geometry)
    bcast = (1 << geometry.address_bits) - 1 if broadcast_address is None else broadcast_address
    schedule = list(schedule)
    if len(schedule) != POSITIONS:
        raise MacError(f"schedule needs {POSITIONS} entries, got {len(schedule)}")
    sched_addr = [bcast if a is None else a for a in schedule]
    sched_words = build_packets(half, sched_addr, np.zeros((POSITIONS, 0), dtype=np.uint8))
    plan = BroadcastPlan(mode, probe)
    em = plan.emissions
    em.append(Emission(0, RateMode.SLOW, indicator_bits(mode, probe), "indicator"))

    def words(pairs):
        pairs = list(pairs)
        if not pairs:
            return np.zeros((0, geometry.packet_len), dtype=np.uint8)
        addr = [a for a, _ in pairs]
        pay = np.stack([int_to_bits(int(p), geometry.payload_bits) for _, p in pairs])
        return build_packets(geometry, addr, pay)

    if mode is RateMode.SLOW:
        controls = list(controls)
        if len(controls) > 4:
            raise MacError(f"slow frame carries at most 4 controls, got {len(controls)}")
        if heartbeats:
            raise MacError("slow frames carry heartbeats as controls")
        tests = list(tests)
        cw = words(controls)
        for i, w in enumerate(cw):
            em.append(Emission((1 + i) * SLOW_SLOT_NS, RateMode.SLOW, w, "control", i,
                               address=controls[i][0]))
        if tests:
            # test packets ride at the fast rate inside the control region
            tw = words(tests)
            base = (1 + len(controls)) * SLOW_SLOT_NS
            if base + len(tests) * FAST_SLOT_NS > 5 * SLOW_SLOT_NS:
                raise MacError("test packets overflow the control region")
            for i, w in enumerate(tw):
                em.append(Emission(base + i * FAST_SLOT_NS, RateMode.FAST, w, "test", i,
                                   address=tests[i][0]))
        acks = list(acks)
        if len(acks) != POSITIONS:
            raise MacError(f"slow frame needs {POSITIONS} ack entries")
        base = 5 * SLOW_SLOT_NS
        ack_pairs = [a for a in acks if a is not None]
        ack_words = iter(words(ack_pairs))
        ack_built = [None if a is None else next(ack_words) for a in acks]
        for c, units in enumerate(_SCHED_COPY_UNITS):
            for p, u in enumerate(units):
                em.append(Emission(base + u * HALF_SLOW_NS, RateMode.SLOW, sched_words[p],
                                   "schedule", p, c, sched_addr[p]))
        for c, units in enumerate(_ACK_COPY_UNITS):
            for p, u in enumerate(units):
                if acks[p] is None:
                    continue
                em.append(Emission(base + u * HALF_SLOW_NS, RateMode.SLOW, ack_built[p],
                                   "ack", p, c, acks[p][0]))
        return plan

    heartbeats = list(heartbeats)
    if len(heartbeats) > 2:
        raise MacError(f"fast frame carries at most 2 heartbeats, got {len(heartbeats)}")
    for i, w in enumerate(words(heartbeats)):
        em.append(Emission((10 + 10 * i) * FAST_SLOT_NS, RateMode.SLOW, w, "heartbeat", i,
                           address=heartbeats[i][0]))
    for p in range(POSITIONS):
        em.append(Emission((31 + p // 2) * FAST_SLOT_NS + (p % 2) * (FAST_SLOT_NS // 2),
                           RateMode.FAST, sched_words[p], "schedule", p, 0, sched_addr[p]))
        q = p + POSITIONS
        em.append(Emission((31 + q // 2) * FAST_SLOT_NS + (q % 2) * (FAST_SLOT_NS // 2),
                           RateMode.FAST, sched_words[p], "schedule", p, 1, sched_addr[p]))
    acks = [a for a in acks]
    controls, tests = list(controls), list(tests)
    n_ack = sum(a is not None for a in acks)
    if n_ack + len(controls) + len(tests) > FAST_CONTROL_SLOTS:
        raise MacError("fast control region overflow")
    slot = 36
    ack_words = iter(words([a for a in acks if a is not None]))
    for j, a in enumerate(acks):
        if a is None:
            continue
        em.append(Emission(slot * FAST_SLOT_NS, RateMode.FAST, next(ack_words), "ack", j, 0, a[0]))
        slot += 1
    for i, w in enumerate(words(controls)):
        em.append(Emission(slot * FAST_SLOT_NS, RateMode.FAST, w, "control", i, address=controls[i][0]))
        slot += 1
    for i, w in enumerate(words(tests)):
        em.append(Emission(slot * FAST_SLOT_NS, RateMode.FAST, w, "test", i, address=tests[i][0]))
        slot += 1
    return plan


def serialize_plan(plan: BroadcastPlan) -> str:
    """Stable hex rendering of a broadcast plan, one emission per line."""
    lines = []
    for e in sorted(plan.emissions, key=lambda e: (e.offset_ns, e.kind, e.entry, e.copy)):
        b = np.asarray(e.bits, dtype=np.uint8)
        h = format(bits_to_int(b), f"0{(b.size + 3) // 4}x")
        lines.append(f"{e.offset_ns} {e.rate.label} {e.kind} {e.entry} {e.copy} {h}")
    return "\n".join(lines) + "\n"


# --- receiver-side decoding -------------------------------------------------

def decode_schedule(received, geometry: PacketGeometry, address: int) -> int | None:
    """Position claimed by ``address`` from ``(copies * 5, 16)`` received halves.

    Rows are ordered copy-major: row ``c * 5 + p`` is copy ``c`` of position
    ``p``.  Any check-passing copy naming ``address`` assigns that position.
    """
    r = np.asarray(received, dtype=np.uint8)
    half = half_geometry(geometry)
    ok, addr, _ = parse_packets(r, half)
    hit = np.flatnonzero(ok & (addr == address))
    if hit.size == 0:
        return None
    return int(hit[0] % POSITIONS)


def decode_schedule_many(received, geometry: PacketGeometry, addresses) -> np.ndarray:
    """Vectorized :func:`decode_schedule` for ``(n_rx, copies * 5, 16)``; -1 marks a miss."""
    r = np.asarray(received, dtype=np.uint8)
    n, k, L = r.shape
    half = half_geometry(geometry)
    ok, addr, _ = parse_packets(r.reshape(n * k, L), half)
    mine = (ok & (addr == np.repeat(np.asarray(addresses), k))).reshape(n, k)
    first = np.argmax(mine, axis=1)
    pos = first % POSITIONS
    return np.where(mine.any(axis=1), pos, -1)


def decode_ack_nak(copies, geometry: PacketGeometry, address: int) -> np.ndarray:
    """16 ACK decisions from up to three receptions; all NAK when no copy is usable."""
    c = np.asarray(copies, dtype=np.uint8)
    if c.size == 0:
        return np.zeros(16, dtype=bool)
    ok, addr, pay = parse_packets(c.reshape(-1, geometry.packet_len), geometry)
    usable = np.flatnonzero(ok & (addr == address))
    if usable.size == 0:
        return np.zeros(geometry.payload_bits, dtype=bool)
    return pay[usable[0]].astype(bool)


def ack_word(received_mask) -> int:
    """Pack 16 per-packet outcomes (first packet in the most significant bit)."""
    return bits_to_int(np.asarray(received_mask, dtype=np.uint8))


def check_frame_accounting(layout: FrameLayout) -> None:
    prev = -1
    for r in layout.regions:
        if r.start != prev + 1 or r.end < r.start:
            raise MacError(f"region {r.kind} breaks slot order")
        prev = r.end
    if prev + 1 != layout.slot_count or layout.total_ns() != FRAME_NS:
        raise MacError("frame does not add up to one second")


def contention_lands_in_region(send_offset_ns: int, layout: FrameLayout) -> bool:
    lo, hi = layout.contention_window()
    return lo <= send_offset_ns and send_offset_ns + HALF_SLOW_NS <= hi


for _lay in (SLOW_LAYOUT, FAST_LAYOUT):
    check_frame_accounting(_lay)
