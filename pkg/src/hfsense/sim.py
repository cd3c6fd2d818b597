"""Discrete-event simulation of one server and its sensors.

Time is integer nanoseconds.  Each frame schedules four events:
``FRAME_START`` (server broadcast, sensors decode and queue uplink),
``UPLINK`` (server decodes the sensor region), ``CONTENTION`` (server
decodes the contention region) and ``FRAME_END``.  Scenario-injected
``DETECTION`` and ``HOURLY`` events interleave by timestamp.

Packets carry no sequence number, so the server maps each received slot to
the packet the sensor actually put there (ground-truth bookkeeping).  The
server still only *accepts* what passes the check with the scheduled
address.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mac
from .analytic import ber_drop
from .channel import NS, Channel, ChannelParams, ClockState, LinkState, RateMode, RateProcess, flip_bits
from .codec import (
    EMERGENCY_REPORT_BITS,
    HOURLY_REPORT_BITS,
    BlockCheckError,
    ReportCheckError,
    block_code,
    block_sizing,
    bits_to_int,
    build_packets,
    check_block,
    half_geometry,
    int_to_bits,
    packet_code,
    parse_packets,
    reassemble_report,
    segment_report,
    sizing,
)
from .emergency import EmergencyState, EpisodeRecord, Mode, contention_words
from .rng import (
    STREAM_CHANNEL,
    STREAM_CONTENTION,
    STREAM_REPLICATION,
    STREAM_SCENARIO,
    STREAM_SENSOR,
    STREAM_TRAFFIC,
    derive_seed,
    substream,
)

GUARD_NS = mac.FAST_SLOT_NS // 8  # a quarter of a fast half-packet
TOF_ALARM_NS = GUARD_NS // 2
NOTICE_REFUSAL = mac.ControlCommand(mac.Opcode.EMERGENCY_NOTICE, 0)
RECONTEND_NS = 10 * NS  # an acknowledged contender not served by then contends again

_INDICATORS = np.stack([int_to_bits(v, 32) for v in (mac.INDICATOR_SLOW, mac.INDICATOR_FAST, mac.INDICATOR_PROBE)])


def decode_indicators(rx: np.ndarray) -> np.ndarray:
    """Vectorized nearest-pattern decoding of ``(n, 32)`` first slots: 0 slow, 1 fast, 2 probe."""
    d = (rx[:, None, :] != _INDICATORS[None, :, :]).sum(axis=2)
    return np.argmin(d, axis=1)


_SLOT_POSITIONS = {}


def _slot_positions(lay) -> np.ndarray:
    """Position owning each slot of ``lay`` (-1 outside the data slots)."""
    t = _SLOT_POSITIONS.get(lay.mode)
    if t is None:
        t = np.full(lay.slot_count, -1, dtype=np.int64)
        for p in range(mac.POSITIONS):
            t[lay.data_slots(p)] = p
        _SLOT_POSITIONS[lay.mode] = t
    return t


class ScenarioError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


# --- scenario -------------------------------------------------------------

@dataclass
class HourlySpec:
    enabled: bool = True
    sensors: int | None = None
    phase: str = "aligned"
    period_s: float = 3600.0


@dataclass
class ContenderSpec:
    count: int = 16
    distribution: str = "fixed"
    detection_spread_s: float = 0.0


@dataclass
class Scenario:
    network_size: int = 1000
    sensors: int = 1000
    packet_len: int = 32
    block_len: int = 512
    channel: ChannelParams = field(default_factory=ChannelParams)
    initial_mode: str = "slow"
    hourly: HourlySpec = field(default_factory=HourlySpec)
    contenders: ContenderSpec = field(default_factory=ContenderSpec)
    episodes: list = field(default_factory=list)
    deadline_s: float = 15.0
    horizon_s: float = 3600.0
    seed: int = 0
    staleness_window_s: float = 900.0
    heartbeat: bool = True
    probe_interval_s: float | None = 60.0
    probe_threshold: float = mac.PROBE_THRESHOLD
    monitor_tests: int = 8
    monitor_window_frames: int = 8
    duplicate_fill: bool = True
    multi_position: bool = True
    calibration_error_s: float = 0.0
    stale_calibration: list = field(default_factory=list)
    tof_overrides: dict = field(default_factory=dict)
    stop_when_idle: bool = False
    trace: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tof_overrides"] = {str(k): v for k, v in self.tof_overrides.items()}
        return d

    def replace(self, **kw) -> "Scenario":
        return dataclasses.replace(self, **kw)


_NESTED = {"channel": ChannelParams, "hourly": HourlySpec, "contenders": ContenderSpec}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ScenarioError(f"{path or 'scenario'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ""
        raise ScenarioError(f"unknown key{'s' if len(unknown) > 1 else ''}{where}: {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        key = f"{path}.{k}" if path else k
        if cls is Scenario and k in _NESTED:
            kw[k] = _build(_NESTED[k], v, key)
        elif cls is ChannelParams and k == "rate_process":
            kw[k] = None if v is None else _build(RateProcess, v, key)
        elif cls is ChannelParams and k == "rate_schedule":
            try:
                kw[k] = [(float(t), RateMode.parse(m).label) for t, m in v]
            except (TypeError, ValueError, KeyError) as exc:
                raise ScenarioError(f"{key}: expected [[start_s, 'slow'|'fast'], ...]") from exc
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ScenarioError(f"{path or 'scenario'}: {exc}") from exc


def scenario_from_dict(data: dict) -> Scenario:
    sc = _build(Scenario, data, "")
    validate(sc)
    return sc


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return scenario_from_dict(data)


def validate(sc: Scenario) -> None:
    def need(cond, msg):
        if not cond:
            raise ScenarioError(msg)

    need(sc.network_size >= 2, "network_size must be >= 2")
    a = (sc.network_size - 1).bit_length()
    need(1 <= sc.sensors < (1 << a), f"sensors must be in [1, {(1 << a) - 1}] (the top address is broadcast)")
    need(sc.sensors <= sc.network_size, "sensors cannot exceed network_size")
    need(0 <= sc.channel.ber < 1, "channel.ber must be in [0, 1)")
    need(0 <= sc.channel.degraded_ber < 1, "channel.degraded_ber must be in [0, 1)")
    need(sc.channel.tof_max_s >= 0, "channel.tof_max_s must be >= 0")
    need(sc.channel.fade_event_rate >= 0, "channel.fade_event_rate must be >= 0")
    need(sc.channel.fade_doppler_hz > 0, "channel.fade_doppler_hz must be > 0")
    need(sc.initial_mode in ("slow", "fast"), "initial_mode must be 'slow' or 'fast'")
    need(sc.horizon_s > 0, "horizon_s must be > 0")
    need(sc.hourly.phase in ("aligned", "staggered"), "hourly.phase must be 'aligned' or 'staggered'")
    need(sc.hourly.period_s > 0, "hourly.period_s must be > 0")
    need(sc.contenders.distribution in ("fixed", "poisson"), "contenders.distribution must be 'fixed' or 'poisson'")
    need(0 <= sc.contenders.count <= sc.sensors, "contenders.count must be in [0, sensors]")
    need(sc.contenders.detection_spread_s >= 0, "contenders.detection_spread_s must be >= 0")
    need(all(float(t) >= 0 for t in sc.episodes), "episode times must be >= 0")
    need(0 < sc.probe_threshold <= 1, "probe_threshold must be in (0, 1]")
    need(0 <= sc.monitor_tests <= 20, "monitor_tests must be in [0, 20]")
    need(sc.monitor_window_frames >= 1, "monitor_window_frames must be >= 1")
    need(sc.packet_len == 32, "the frame layouts assume 32-bit packets")
    g = sizing(sc.network_size, sc.packet_len)
    need(g.payload_bits == 16, "the frame layouts need 16-bit payloads (network_size <= 1024)")
    block_sizing(sc.block_len, g)


def baseline_scenario(**kw) -> Scenario:
    return Scenario(**kw)


# --- events ---------------------------------------------------------------

FRAME_START, UPLINK, CONTENTION, FRAME_END, DETECTION, HOURLY = range(6)
EVENT_NAMES = ("frame_start", "uplink", "contention", "frame_end", "detection", "hourly")


class EventQueue:
    """Min-heap ordered by ``(time_ns, sequence)``; ties are impossible."""

    def __init__(self):
        self._heap = []
        self._seq = 0
        self.now = 0

    def push(self, t_ns: int, kind: int, payload=None):
        t_ns = int(t_ns)
        if t_ns < self.now:
            raise InvariantViolation(f"event {EVENT_NAMES[kind]} scheduled at {t_ns} before now={self.now}")
        heapq.heappush(self._heap, (t_ns, self._seq, kind, payload))
        self._seq += 1

    def pop(self):
        t, seq, kind, payload = heapq.heappop(self._heap)
        self.now = t
        return t, seq, kind, payload

    def peek_time(self):
        return self._heap[0][0] if self._heap else None

    def __len__(self):
        return len(self._heap)


# --- transfers ------------------------------------------------------------

class SensorTransfer:
    """A report as the sensor sees it: prebuilt packets plus what it believes was ACKed."""

    def __init__(self, kind: str, report_id: int, words: np.ndarray, payloads: np.ndarray):
        self.kind = kind
        self.report_id = report_id
        self.words = words
        self.payloads = payloads
        self.acked = np.zeros(len(words), dtype=bool)

    @property
    def done(self) -> bool:
        return bool(self.acked.all())

    def pending(self) -> np.ndarray:
        return np.flatnonzero(~self.acked)


class ServerTransfer:
    def __init__(self, address: int, kind: str, report_id: int, n: int, payload_bits: int,
                 created_ns: int, truth: np.ndarray, ppb: int, report_len: int):
        self.address = address
        self.kind = kind
        self.report_id = report_id
        self.n = n
        self.have = np.zeros(n, dtype=bool)
        self.payload = np.zeros((n, payload_bits), dtype=np.uint8)
        self.attempts = np.zeros(n, dtype=np.int64)
        self.first_ok = np.zeros(n, dtype=np.int64)
        self.truth = truth
        self.ppb = ppb
        self.report_len = report_len
        self.block_ok = np.zeros(n // ppb, dtype=bool)
        self.created_ns = created_ns
        self.verified_ns = None
        self.transmissions = 0
        self.scheduled_frames = 0
        self.silent_frames = 0
        self.ever_heard = False
        self.slots_assigned = 0
        self.block_retransmits = 0
        self.report_retransmits = 0

    @property
    def key(self):
        return (self.address, self.kind, self.report_id)

    @property
    def verified(self) -> bool:
        return self.verified_ns is not None

    def attempts_to_delivery(self) -> int:
        return int(self.first_ok.sum())


@dataclass
class Sensor:
    address: int
    link: LinkState
    clock: ClockState
    believed_tof_ns: float
    key: bytes
    rng: np.random.Generator
    hourly: deque = field(default_factory=deque)
    emergency: SensorTransfer | None = None
    detection_ns: int | None = None
    emergency_acked: bool = False
    contended: bool = False
    waiting_since_ns: int | None = None
    last_tx: list = field(default_factory=list)
    last_tx_mode: RateMode | None = None
    probe_armed: int | None = None
    probe_digests: list = field(default_factory=list)
    hourly_count: int = 0

    def timing_error_ns(self, t_ns: int) -> float:
        return self.link.true_tof(t_ns) + self.clock.offset_at(t_ns) - self.believed_tof_ns

    def active_transfer(self) -> SensorTransfer | None:
        if self.emergency is not None and not self.emergency.done:
            return self.emergency
        for tr in self.hourly:
            if not tr.done:
                return tr
        return None

    def wants_schedule(self) -> bool:
        return self.active_transfer() is not None or (
            self.detection_ns is not None and self.emergency is not None)


# --- metrics --------------------------------------------------------------

STALENESS_BUCKETS_S = (60, 120, 300, 600, 900, 1800, 3600)


@dataclass
class Metrics:
    seed: int = 0
    horizon_s: float = 0.0
    end_ns: int = 0
    frames: int = 0
    mode_frames: dict = field(default_factory=lambda: {"slow": 0, "fast": 0})
    mismatch_frames: int = 0
    sent: int = 0
    acked: int = 0
    naked: int = 0
    lost: int = 0
    in_flight: int = 0
    undetected_accepted: int = 0
    redundant: int = 0
    schedule_misses: int = 0
    pileups: int = 0
    ack_words_lost: int = 0
    false_acks: int = 0
    block_retransmits: int = 0
    report_retransmits: int = 0
    retransmit_requests: int = 0
    reports: list = field(default_factory=list)
    hourly_generated: int = 0
    hourly_completed: int = 0
    heartbeats_sent: int = 0
    heartbeats_verified: int = 0
    heartbeats_failed: int = 0
    stale_flags: int = 0
    staleness_histogram: dict = field(default_factory=lambda: {str(b): 0 for b in STALENESS_BUCKETS_S + ("inf",)})
    max_staleness_s: float = 0.0
    tof_calibrations: int = 0
    impinged: int = 0
    probes: list = field(default_factory=list)
    downgrades: int = 0
    contention_frames: int = 0
    contention_transmissions: int = 0
    false_triggers: int = 0
    preemption_violations: int = 0
    episodes: list = field(default_factory=list)
    delivered_bits: int = 0

    def conservation_ok(self) -> bool:
        return self.sent == self.acked + self.naked + self.lost + self.in_flight

    def summary(self) -> dict:
        hourly = [r for r in self.reports if r["kind"] == "hourly"]
        emerg = [r for r in self.reports if r["kind"] == "emergency"]
        out = {
            "goodput_bps": self.delivered_bits / self.horizon_s if self.horizon_s else 0.0,
            "packet_success_fraction": self.acked / self.sent if self.sent else None,
            "hourly_all_completed": self.hourly_completed == self.hourly_generated,
            "conservation_ok": self.conservation_ok(),
        }
        if hourly:
            out["mean_transmissions_per_hourly_report"] = float(np.mean([r["transmissions"] for r in hourly]))
            out["mean_attempts_to_delivery_hourly"] = float(np.mean([r["attempts_to_delivery"] for r in hourly]))
            out["mean_channel_seconds_per_user_scheduled"] = float(np.mean([r["slots_assigned"] for r in hourly])) / 80.0
            out["mean_channel_seconds_per_user_transmitted"] = out["mean_transmissions_per_hourly_report"] / 80.0
        if emerg:
            out["mean_attempts_to_delivery_emergency"] = float(np.mean([r["attempts_to_delivery"] for r in emerg]))
            out["mean_transmissions_per_emergency_report"] = float(np.mean([r["transmissions"] for r in emerg]))
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["summary"] = self.summary()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# --- the simulation ---------------------------------------------------------

class Simulation:
    def __init__(self, scenario: Scenario):
        validate(scenario)
        sc = self.sc = scenario
        self.geometry = sizing(sc.network_size, sc.packet_len)
        self.half = half_geometry(self.geometry)
        self.block = block_sizing(sc.block_len, self.geometry)
        self.bcast = (1 << self.geometry.address_bits) - 1
        self.horizon_ns = int(round(sc.horizon_s * NS))
        self.channel = Channel(sc.channel, substream(sc.seed, STREAM_CHANNEL), sc.seed, sc.horizon_s)
        self.cont_rng = substream(sc.seed, STREAM_CONTENTION)
        self.scen_rng = substream(sc.seed, STREAM_SCENARIO)
        self.seal = mac.ToySeal()
        self.server_key = mac.server_key(sc.seed)
        self.sensors: dict[int, Sensor] = {}
        self.queue = EventQueue()
        self.m = Metrics(seed=sc.seed, horizon_s=sc.horizon_s)
        self.mode = RateMode.parse(sc.initial_mode)
        self.emg = EmergencyState()
        self.positions: list = [None] * mac.POSITIONS
        self.transfers: dict = {}
        self.hourly_queue: deque = deque()
        self.last_report_ns: dict = {}
        self.pending_acks = None
        self.prev_layout_mode = None
        self.controls: deque = deque()
        self.control_keys: set = set()
        self.hb_cursor = 0
        self.hb_last_ok: dict = {}
        self.hb_last_sent: dict = {}
        self.stale: set = set()
        self.frame_plan = None
        self.inflight = []
        self.exchanges = {}
        self.probe = None
        self.last_probe_ns = 0
        self.probe_cursor = 0
        self.monitor = {"ok": 0, "n": 0, "frames": 0, "expected": {}}
        self.episode_records: list = []
        self.pending_episodes: list = []
        self.trace: list = []
        self.silent_hourly: dict = {}
        self.ep_counter = 0
        self.active_episode = None
        self.detected: set = set()
        self._heard_now: set = set()

    # -- sensors ----------------------------------------------------------

    def sensor(self, addr: int) -> Sensor:
        s = self.sensors.get(addr)
        if s is not None:
            return s
        sc = self.sc
        rng = substream(sc.seed, STREAM_SENSOR, addr)
        tof_s = sc.tof_overrides.get(addr, sc.tof_overrides.get(str(addr)))
        if tof_s is None:
            tof_s = rng.uniform(0.0, sc.channel.tof_max_s)
        tof_ns = int(round(float(tof_s) * NS))
        drift = sc.channel.tof_drift_rate * rng.choice((-1.0, 1.0))
        clock = ClockState(0.0, sc.channel.clock_drift_rate * rng.uniform(-1.0, 1.0))
        err = rng.uniform(-1.0, 1.0) * sc.calibration_error_s * NS
        believed = 0.0 if addr in sc.stale_calibration else tof_ns + err
        link = LinkState(addr, tof_ns, drift, int(round(believed)))
        s = Sensor(addr, link, clock, believed, mac.sensor_key(sc.seed, addr), rng)
        self.sensors[addr] = s
        return s

    def _log(self, t, what, **kw):
        if self.sc.trace:
            self.trace.append({"t_ns": int(t), "event": what, **kw})

    # -- setup ------------------------------------------------------------

    def _schedule_initial(self):
        sc = self.sc
        hs = sc.hourly
        if hs.enabled:
            n = hs.sensors if hs.sensors is not None else sc.sensors
            period = int(round(hs.period_s * NS))
            for a in range(n):
                off = 0 if hs.phase == "aligned" else (a * period) // n
                if off < self.horizon_ns:
                    self.queue.push(off, HOURLY, a)
        for i, t in enumerate(sorted(float(x) for x in sc.episodes)):
            t0 = int(round(t * NS))
            ep_rng = substream(sc.seed, STREAM_SCENARIO, "episode", i)
            if sc.contenders.distribution == "poisson":
                k = int(ep_rng.poisson(sc.contenders.count))
            else:
                k = sc.contenders.count
            k = max(1, min(k, sc.sensors))
            members = [int(a) for a in ep_rng.choice(sc.sensors, size=k, replace=False)]
            spread = int(round(sc.contenders.detection_spread_s * NS))
            det = {}
            for j, a in enumerate(members):
                det[a] = t0 + (0 if j == 0 or spread == 0 else int(ep_rng.integers(0, spread + 1)))
            self.pending_episodes.append((i, members, det))
            for a, td in det.items():
                self.queue.push(td, DETECTION, (i, a))
        self.queue.push(0, FRAME_START, 0)

    # -- event handlers -------------------------------------------------------

    def run(self) -> Metrics:
        self._schedule_initial()
        last_t = 0
        while len(self.queue):
            t = self.queue.peek_time()
            if t >= self.horizon_ns:
                break
            t, _, kind, payload = self.queue.pop()
            if t < last_t:
                raise InvariantViolation("event order violated", self.trace[-50:])
            last_t = t
            if kind == FRAME_START:
                self._frame_start(t, payload)
            elif kind == UPLINK:
                self._uplink(t, payload)
            elif kind == CONTENTION:
                self._contention(t, payload)
            elif kind == FRAME_END:
                if self._frame_end(t, payload):
                    break
            elif kind == DETECTION:
                self._detection(t, payload)
            elif kind == HOURLY:
                self._hourly(t, payload)
        self._finish(last_t)
        return self.m

    def _hourly(self, t, addr):
        s = self.sensor(addr)
        rid = s.hourly_count
        s.hourly_count += 1
        rng = substream(self.sc.seed, STREAM_TRAFFIC, addr, rid)
        bits = rng.integers(0, 2, size=HOURLY_REPORT_BITS, dtype=np.uint8)
        blocks = segment_report(bits, self.block, self.geometry, "hourly")
        payloads = blocks.reshape(-1, self.geometry.payload_bits)
        words = build_packets(self.geometry, np.full(len(payloads), addr), payloads)
        s.hourly.append(SensorTransfer("hourly", rid, words, payloads))
        st = ServerTransfer(addr, "hourly", rid, len(payloads), self.geometry.payload_bits, t, payloads,
                            self.block.packets_per_block, HOURLY_REPORT_BITS)
        self.transfers[st.key] = st
        self.hourly_queue.append(st)
        self.m.hourly_generated += 1
        nxt = t + int(round(self.sc.hourly.period_s * NS))
        if nxt < self.horizon_ns:
            self.queue.push(nxt, HOURLY, addr)

    def _detection(self, t, payload):
        ep, addr = payload
        s = self.sensor(addr)
        if s.detection_ns is not None and s.emergency is not None and not s.emergency.done:
            return
        s.detection_ns = t
        s.emergency_acked = False
        s.contended = False
        self.detected.add(addr)
        rng = substream(self.sc.seed, STREAM_TRAFFIC, "emergency", ep, addr)
        bits = rng.integers(0, 2, size=EMERGENCY_REPORT_BITS, dtype=np.uint8)
        blocks = segment_report(bits, self.block, self.geometry, "emergency")
        payloads = blocks.reshape(-1, self.geometry.payload_bits)
        words = build_packets(self.geometry, np.full(len(payloads), addr), payloads)
        s.emergency = SensorTransfer("emergency", ep, words, payloads)
        st = ServerTransfer(addr, "emergency", ep, len(payloads), self.geometry.payload_bits, t, bits,
                            len(payloads), EMERGENCY_REPORT_BITS)
        st.truth_payloads = payloads
        self.transfers[st.key] = st
        self._log(t, "detection", address=addr, episode=ep)

    def _episode_record(self, t_ns, frame):
        # a straggler of an episode that closed early continues that episode
        for rec in self.episode_records:
            if not rec.complete and self._heard_now & set(rec.contenders):
                return rec
        # otherwise the episode whose detections precede this trigger
        best = None
        for i, members, det in self.pending_episodes:
            if min(det.values()) <= t_ns and not any(r.episode_id == i for r in self.episode_records):
                best = (i, members, det)
                break
        if best is None:
            rec = EpisodeRecord(-1, [], {-1: t_ns}, self.sc.deadline_s)
            self.m.false_triggers += 1
        else:
            i, members, det = best
            rec = EpisodeRecord(i, list(members), dict(det), self.sc.deadline_s)
        self.episode_records.append(rec)
        return rec

    # -- frame start: server broadcast and sensor decisions ---------------------

    def _emergency_transfer(self, addr):
        s = self.sensors.get(addr)
        if s is None or s.emergency is None:
            return None
        return self.transfers.get((addr, "emergency", s.emergency.report_id))

    def _fill_positions(self, t):
        emergency = self.emg.emergency
        seen = set()
        for p, st in enumerate(self.positions):
            if st is None:
                continue
            if (st.verified or (emergency and st.kind == "hourly") or getattr(st, "dropped", False)
                    or id(st) in seen):
                # extra positions are handed out afresh every frame
                self.positions[p] = None
            seen.add(id(st))
        for p in range(mac.POSITIONS):
            if self.positions[p] is not None:
                continue
            if emergency:
                a = self.emg.next_reporter()
                while a is not None:
                    st = self._emergency_transfer(a)
                    if st is None:
                        # heard an address with nothing to send: a false decode
                        st = ServerTransfer(a, "emergency", -1, 32, self.geometry.payload_bits, t,
                                            None, 32, EMERGENCY_REPORT_BITS)
                        st.phantom = True
                    if not st.verified:
                        break
                    a = self.emg.next_reporter()
                if a is not None:
                    st.dropped = False
                    st.silent_frames = 0
                    self.positions[p] = st
                    self.emg.on_scheduled(a, t)
            else:
                while self.hourly_queue and self.hourly_queue[0].verified:
                    self.hourly_queue.popleft()
                busy = {x.key for x in self.positions if x is not None}
                pick = None
                for st in self.hourly_queue:
                    if not st.verified and st.key not in busy and not any(
                            x is not None and x.address == st.address for x in self.positions):
                        pick = st
                        break
                if pick is not None:
                    self.positions[p] = pick
        if self.sc.multi_position:
            active = [x for x in self.positions if x is not None and not x.verified]
            if active:
                for p in range(mac.POSITIONS):
                    if self.positions[p] is None:
                        need = max(active, key=lambda x: (int((~x.have).sum()), -x.address))
                        self.positions[p] = need
        if emergency and any(x is not None and x.kind == "hourly" for x in self.positions):
            self.m.preemption_violations += 1

    def _queue_control(self, addr, cmd: mac.ControlCommand, priority: int):
        key = (addr, cmd.opcode, cmd.argument)
        if key in self.control_keys:
            return
        self.control_keys.add(key)
        self.controls.append((priority, len(self.control_keys), addr, cmd))

    def _take_controls(self, n: int, t) -> list:
        out = []
        if n <= 0:
            return out
        items = sorted(self.controls, key=lambda x: (x[0], x[1]))
        take, keep = items[:n], items[n:]
        self.controls = deque(keep)
        for _, _, addr, cmd in take:
            self.control_keys.discard((addr, cmd.opcode, cmd.argument))
            out.append((addr, cmd))
        if self.sc.heartbeat:
            picked = {a for a, _ in out}
            while len(out) < n:
                addr = self._next_heartbeat_target(picked)
                if addr is None or addr in picked:
                    break
                picked.add(addr)
                arg = int(self.scen_rng.integers(0, 1 << mac.ARG_BITS))
                out.append((addr, mac.ControlCommand(mac.Opcode.HEALTH_CHECK, arg)))
        return out

    def _next_heartbeat_target(self, exclude=frozenset()):
        n = self.sc.sensors
        if n == 0:
            return None
        # stale sensors first, then round-robin
        stale = [x for x in self.stale if x not in exclude]
        if stale:
            a = min(stale, key=lambda x: (self.hb_last_sent.get(x, -1), x))
            if self.hb_last_sent.get(a, -1) < self.queue.now:
                return a
        for _ in range(n):
            a = self.hb_cursor % n
            self.hb_cursor += 1
            if a not in exclude:
                return a
        return None

    def _frame_start(self, t, f):
        sc = self.sc
        mode = self.mode
        lay = mac.layout_for(mode)
        chan_mode = self.channel.rate_at(t)
        self.m.frames += 1
        self.m.mode_frames[mode.label] += 1
        if mode is RateMode.FAST and chan_mode is RateMode.SLOW:
            self.m.mismatch_frames += 1

        probe_stage = None
        if self.probe is not None:
            probe_stage = self.probe["stages"].get(f)
        elif (mode is RateMode.SLOW and sc.probe_interval_s is not None and not self.emg.emergency
              and t - self.last_probe_ns >= int(sc.probe_interval_s * NS) and t > 0):
            self._start_probe(t, f)
            probe_stage = "announce"

        self._fill_positions(t)
        schedule = [None if st is None else st.address for st in self.positions]
        for st in {id(x): x for x in self.positions if x is not None}.values():
            st.scheduled_frames += 1
        for p, st in enumerate(self.positions):
            if st is not None:
                st.slots_assigned += lay.packets_per_position

        acks = self.pending_acks if self.prev_layout_mode is mode else None
        if acks is None:
            acks = [None] * (mac.POSITIONS if mode is RateMode.SLOW else mac.FAST_ACK_WORDS)
        self.pending_acks = None

        heartbeats, controls, tests = [], [], []
        self.exchanges = {}
        if mode is RateMode.SLOW:
            if probe_stage == "tests":
                tests = [(self.bcast, w) for w in self.probe["test_payloads"]]
            else:
                n_ctl = 4
                if probe_stage == "announce":
                    for a in self.probe["sensors"]:
                        controls.append((a, mac.ControlCommand(mac.Opcode.RATE_PROBE, 1)))
                controls += self._take_controls(n_ctl - len(controls), t)
        else:
            heartbeats = self._take_controls(2, t)
            n_ack = sum(a is not None for a in acks)
            room = mac.FAST_CONTROL_SLOTS - n_ack
            n_test = min(sc.monitor_tests, room)
            controls = self._take_controls(min(20, room - n_test), t)
            if n_test:
                # a scheduled sensor if there is one, else any sensor in turn
                mon = next((x.address for x in self.positions if x is not None), None)
                if mon is None:
                    mon = f % sc.sensors
                pays = [int(v) for v in self.scen_rng.integers(0, 1 << 16, size=n_test)]
                tests = [(mon, v) for v in pays]

        # seal controls and remember the expected replies by reply slot
        sealed_ctl, sealed_hb = [], []
        reply_slots = lay.reply_slots()
        r = 0
        for addr, cmd in heartbeats:
            ex = mac.HeartbeatExchange.create(addr, cmd, self.sensor(addr).key, self.server_key, self.seal)
            sealed_hb.append((addr, ex.sealed))
            self.exchanges[int(reply_slots[r])] = ex
            r += 1
        for addr, cmd in controls:
            ex = mac.HeartbeatExchange.create(addr, cmd, self.sensor(addr).key, self.server_key, self.seal)
            sealed_ctl.append((addr, ex.sealed))
            self.exchanges[int(reply_slots[r])] = ex
            r += 1
        for addr, cmd in heartbeats + controls:
            self.m.heartbeats_sent += 1
            self.hb_last_sent[addr] = t
        mon_slots = {}
        if mode is RateMode.FAST and tests:
            for i, (addr, v) in enumerate(tests):
                mon_slots[int(reply_slots[r + i])] = (addr, v)
        self.monitor["expected"] = mon_slots

        plan = mac.build_server_broadcast(
            f, schedule, acks, sealed_ctl, mode, self.geometry, probe=(probe_stage == "digests"),
            heartbeats=sealed_hb, tests=tests, broadcast_address=self.bcast)
        self.frame_plan = (f, t, mode, lay, plan, list(self.positions), probe_stage)
        self._log(t, "frame_start", frame=f, mode=mode.label, schedule=schedule, probe=probe_stage or "")
        self._deliver(t, f, mode, lay, plan, probe_stage)
        self.prev_layout_mode = mode
        self.queue.push(t + lay.sensor_region_end_ns, UPLINK, f)
        self.queue.push(t + lay.contention_window()[1], CONTENTION, f)
        self.queue.push(t + mac.FRAME_NS, FRAME_END, f)

    def _broadcast(self, emissions, receivers, t):
        if not emissions or not receivers:
            return None
        words = np.stack([e.bits for e in emissions])
        starts = [t + e.offset_ns for e in emissions]
        rate = emissions[0].rate
        return self.channel.broadcast(words, starts, rate, [s.address for s in receivers])

    def _deliver(self, t, f, mode, lay, plan, probe_stage):
        """Sensors decode the broadcast and queue their uplink for this frame."""
        sc = self.sc
        g = self.geometry
        listeners = [s for s in self.sensors.values() if s.wants_schedule() or s.last_tx]
        by_kind = {}
        for e in plan.emissions:
            by_kind.setdefault(e.kind, []).append(e)
        # the layout indicator, decoded by majority
        view = set()
        if listeners:
            rx = self._broadcast(by_kind["indicator"], listeners, t)
            want = 2 if probe_stage == "digests" else (0 if mode is RateMode.SLOW else 1)
            got = decode_indicators(rx[:, 0, :])
            view = {s.address for s, v in zip(listeners, got.tolist()) if v == want}
        ok_layout = view

        # schedule halves
        claims = {}
        sched = by_kind.get("schedule", [])
        sched_rx = [s for s in listeners if s.wants_schedule() and s.address in ok_layout]
        if sched_rx and sched:
            rx = self._broadcast(sched, sched_rx, t)
            n, k, L = rx.shape
            okm, addr, _ = parse_packets(rx.reshape(n * k, L), self.half)
            mine = okm.reshape(n, k) & (addr.reshape(n, k) == np.array([s.address for s in sched_rx])[:, None])
            entries = np.array([e.entry for e in sched])
            for i, s in enumerate(sched_rx):
                if mine[i].any():
                    claims[s.address] = sorted(set(entries[mine[i]].tolist()))
        positions_truth = {}
        for p, st in enumerate(self.positions):
            if st is not None:
                positions_truth.setdefault(st.address, []).append(p)
        for a, ps in positions_truth.items():
            s = self.sensors.get(a)
            if s is not None and s.active_transfer() is not None and a not in claims:
                self.m.schedule_misses += 1
        for a, ps in claims.items():
            if set(ps) - set(positions_truth.get(a, [])):
                self.m.pileups += 1
            s = self.sensors[a]
            if s.emergency is not None and not s.emergency.done and s.contended:
                # being scheduled tells a contender it was heard
                s.emergency_acked = True
                s.waiting_since_ns = t

        # ACK words for last frame's transmitters
        acks = by_kind.get("ack", [])
        ack_rx = [s for s in listeners if s.last_tx]
        for s in ack_rx:
            self._apply_acks(s, acks, mode, t)

        # controls and heartbeats, each to its addressee
        for kind in ("heartbeat", "control"):
            for e in by_kind.get(kind, []):
                s = self.sensor(e.address)
                rx = self.channel.broadcast(e.bits[None, :], [t + e.offset_ns], e.rate, [s.address])[0, 0]
                okm, addr, pay = parse_packets(rx[None, :], g)
                if not okm[0] or int(addr[0]) != s.address:
                    continue
                cmd, reply = mac.sensor_respond(bits_to_int(pay[0]), s.key, self.server_key, self.seal)
                if cmd is None:
                    continue
                self._sensor_command(s, cmd, t, f)
                if cmd.opcode is mac.Opcode.EMERGENCY_NOTICE and (s.emergency is None or s.emergency.done):
                    # nothing to report: answer with the notice's negative form
                    reply = self.seal.seal(self.server_key, NOTICE_REFUSAL.encode())
                slot = self._reply_slot_for(e, lay, plan)
                self.inflight.append(("reply", s.address, lay, [slot], np.array([reply]), mode))

        # probe test packets (slow) or monitor tests (fast)
        tests = by_kind.get("test", [])
        if tests and probe_stage == "tests":
            armed = [self.sensor(a) for a in self.probe["sensors"]
                     if self.sensor(a).probe_armed == self.probe["start"]]
            if armed:
                rx = self._broadcast(tests, armed, t)
                for s, words in zip(armed, rx):
                    s.probe_digests = [mac.probe_digest(w[: g.data_bits]) for w in words]
        elif tests and mode is RateMode.FAST:
            mon = self.sensor(tests[0].address)
            rx = self._broadcast(tests, [mon], t)[0]
            digests = []
            for w in rx:
                okm, addr, _ = parse_packets(w[None, :], g)
                digests.append(mac.probe_digest(w[: g.data_bits]) if okm[0] and int(addr[0]) == mon.address else None)
            base = len(self.exchanges)
            slots = [int(lay.reply_slots()[base + i]) for i in range(len(digests))]
            keep = [(sl, d) for sl, d in zip(slots, digests) if d is not None]
            if keep:
                self.inflight.append(("monitor", mon.address, lay, [k[0] for k in keep],
                                      np.array([k[1] for k in keep]), mode))

        # probe digests ride in slots 97..104 of the probe frame
        if probe_stage == "digests":
            for i, a in enumerate(self.probe["sensors"]):
                s = self.sensor(a)
                if s.probe_armed == self.probe["start"] and s.probe_digests:
                    self.inflight.append(("digest", a, lay, [i], np.array(s.probe_digests), mode))
                s.probe_digests = []

        # data
        for s in self.sensors.values():
            s.last_tx = []
        for a, ps in claims.items():
            s = self.sensors[a]
            tr = s.active_transfer()
            if tr is None:
                continue
            slots, owners = [], []
            for p in ps:
                ds = lay.data_slots(p)
                keep = np.ones(len(ds), dtype=bool)
                if probe_stage == "digests":
                    keep = ~mac.probe_displaced(p)
                for k in np.flatnonzero(keep):
                    slots.append(int(ds[k]))
                    owners.append((p, int(k)))
            order = np.argsort(slots, kind="stable")
            slots = [slots[i] for i in order]
            owners = [owners[i] for i in order]
            pending = tr.pending()
            if pending.size == 0:
                continue
            if pending.size >= len(slots):
                idx = pending[: len(slots)]
            elif sc.duplicate_fill:
                idx = np.resize(pending, len(slots))
            else:
                idx = pending
            slots = slots[: len(idx)]
            owners = owners[: len(idx)]
            s.last_tx = [(p, k, int(i), tr) for (p, k), i in zip(owners, idx)]
            s.last_tx_mode = mode
            self.inflight.append(("data", a, lay, slots, (tr, idx), mode))

    def _reply_slot_for(self, emission, lay, plan):
        ctl = [e for e in plan.emissions if e.kind in ("heartbeat", "control")]
        ctl.sort(key=lambda e: (e.kind != "heartbeat", e.entry))
        return int(lay.reply_slots()[ctl.index(emission)])

    def _apply_acks(self, s: Sensor, acks, mode, t):
        if s.last_tx_mode is not mode:
            s.last_tx = []
            return
        mine = [e for e in acks if e.address == s.address]
        groups = {}
        for e in mine:
            groups.setdefault(e.entry, []).append(e)
        decided = {}
        for entry, es in groups.items():
            rx = self.channel.broadcast(np.stack([e.bits for e in es]), [t + e.offset_ns for e in es],
                                        es[0].rate, [s.address])[0]
            bits = mac.decode_ack_nak(rx, self.geometry, s.address)
            usable = bool(np.any(packet_code(self.geometry).passes(rx)))
            if not usable:
                self.m.ack_words_lost += 1
            decided[entry] = bits
        per_pos = 1 if mode is RateMode.SLOW else 10
        for p, k, idx, tr in s.last_tx:
            entry = p if mode is RateMode.SLOW else p * per_pos + k // 16
            bits = decided.get(entry)
            if bits is None:
                continue
            if bits[k % 16]:
                tr.acked[idx] = True
        s.last_tx = []

    def _sensor_command(self, s: Sensor, cmd: mac.ControlCommand, t, f):
        op = cmd.opcode
        if op is mac.Opcode.TOF_CALIBRATE:
            s.believed_tof_ns += mac.decode_tof_delta(cmd.argument)
            s.link.calibrated_tof_ns = int(round(s.believed_tof_ns))
        elif op is mac.Opcode.RETRANSMIT_REQUEST:
            what, i = mac.parse_retransmit(cmd.argument)
            tr = s.emergency if (s.emergency is not None and self._transfer_needs(s.address, "emergency")) else None
            if tr is None:
                for h in s.hourly:
                    st = self.transfers.get((s.address, "hourly", h.report_id))
                    if st is not None and not st.verified:
                        tr = h
                        break
            if tr is None:
                return
            if what == "report":
                tr.acked[:] = False
            elif what == "block":
                ppb = self.block.packets_per_block
                tr.acked[i * ppb:(i + 1) * ppb] = False
            elif i < len(tr.acked):
                tr.acked[i] = False
        elif op is mac.Opcode.EMERGENCY_NOTICE and s.emergency is not None and not s.emergency.done:
            s.emergency_acked = True
            s.waiting_since_ns = t
        elif op is mac.Opcode.RATE_PROBE:
            s.probe_armed = self.probe["start"] if self.probe is not None else None

    def _transfer_needs(self, addr, kind):
        s = self.sensors[addr]
        if kind == "emergency" and s.emergency is not None:
            st = self.transfers.get((addr, "emergency", s.emergency.report_id))
            return st is not None and not st.verified
        return False

    # -- probing ----------------------------------------------------------

    def _start_probe(self, t, f):
        n = self.sc.sensors
        picks = [(self.probe_cursor + i) % n for i in range(min(2, n))]
        self.probe_cursor += 2
        pays = [int(v) for v in self.scen_rng.integers(0, 1 << 16, size=mac.PROBE_TESTS)]
        words = build_packets(self.geometry, [self.bcast] * len(pays),
                              np.stack([int_to_bits(v, 16) for v in pays]))
        expected = [mac.probe_digest(w[: self.geometry.data_bits]) for w in words]
        self.probe = {"start": f, "sensors": picks, "test_payloads": pays, "expected": expected,
                      "stages": {f: "announce", f + 1: "tests", f + 2: "digests"}, "ok": 0, "n": 0}
        self.last_probe_ns = t

    # -- uplink -----------------------------------------------------------

    def _uplink(self, t, f):
        ft, t0, mode, lay, plan, positions, probe_stage = self.frame_plan
        g = self.geometry
        tx_starts, tx_durs, tx_words, tx_meta, segments = [], [], [], [], []
        inflight, self.inflight = self.inflight, []
        for kind, a, tlay, slots, payload, tmode in inflight:
            s = self.sensors[a]
            err = s.timing_error_ns(t0)
            if kind == "data":
                tr, idx = payload
                words = tr.words[idx]
                offs = [sl * lay.slot_ns for sl in slots]
                rate = mode
            elif kind in ("reply", "monitor"):
                words = build_packets(g, [a] * len(payload), np.stack([int_to_bits(int(v), 16) for v in payload]))
                offs = [sl * lay.slot_ns for sl in slots]
                rate = mode
            else:
                base = mac.PROBE_SLOW_SLOTS[0] * lay.slot_ns + slots[0] * mac.PROBE_TESTS * mac.FAST_SLOT_NS
                words = build_packets(g, [a] * len(payload), np.stack([int_to_bits(int(v), 16) for v in payload]))
                offs = [base + i * mac.FAST_SLOT_NS for i in range(len(payload))]
                rate = RateMode.FAST
            rx = self.channel.transmit_many(words, [t0 + o for o in offs], rate, a)
            dur = rate.duration_ns(g.packet_len)
            segments.append((kind, a, payload, offs, len(tx_words)))
            for i, o in enumerate(offs):
                tx_starts.append(o + err)
                tx_durs.append(dur)
                tx_words.append(rx[i])
                tx_meta.append((kind, a, i, payload, o, err))
            if abs(err) > TOF_ALARM_NS:
                self._queue_control(a, mac.ControlCommand(mac.Opcode.TOF_CALIBRATE, mac.encode_tof_delta(err)), 1)

        n = len(tx_words)
        garbled = np.zeros(n, dtype=bool)
        if n:
            offs_nom = [m[4] for m in tx_meta]
            errs = np.array([m[5] for m in tx_meta])
            misaligned = np.abs(errs) > GUARD_NS
            dup = len(set(offs_nom)) != len(offs_nom)
            if dup or misaligned.any():
                received, collided = self.channel.overlap_collide(
                    list(zip([int(x) for x in tx_starts], tx_durs, tx_words)), tolerance_ns=GUARD_NS)
                tx_words = received
                garbled = collided | misaligned
                for i in np.flatnonzero(misaligned):
                    tx_words[i] = self.channel.rng.integers(0, 2, size=g.packet_len, dtype=np.uint8)
                self.m.impinged += int(misaligned.sum())
        words = np.stack(tx_words) if n else np.zeros((0, g.packet_len), dtype=np.uint8)
        if n:
            okm, addrs, pays = parse_packets(words, g)
        else:
            okm, addrs, pays = np.zeros(0, bool), np.zeros(0, np.int64), np.zeros((0, g.payload_bits), np.uint8)

        # ACK bookkeeping for the next frame
        slot_ok = np.zeros(lay.slot_count, dtype=bool)
        heard_positions = set()
        touched = {}
        slot_pos = _slot_positions(lay)
        sched = np.array([-1 if p is None else p.address for p in positions], dtype=np.int64)
        for kind, a, payload, offs, k0 in segments:
            k1 = k0 + len(offs)
            if kind != "data":
                continue
            tr, idx = payload
            st = self.transfers[(a, tr.kind, tr.report_id)]
            slots = np.asarray(offs, dtype=np.int64) // lay.slot_ns
            pos = slot_pos[slots]
            garb = garbled[k0:k1]
            accept = okm[k0:k1] & (addrs[k0:k1] == a) & (sched[pos] == a) & ~garb
            n_seg = k1 - k0
            n_lost = int(garb.sum())
            n_ok = int(accept.sum())
            self.m.sent += n_seg
            self.m.lost += n_lost
            self.m.acked += n_ok
            self.m.naked += n_seg - n_lost - n_ok
            st.transmissions += n_seg
            st.ever_heard = True
            heard_positions.update(pos.tolist())
            slot_ok[slots] = accept
            sent = touched.setdefault(id(st), (st, set()))[1]
            if n_ok:
                bad = np.any(pays[k0:k1][accept] != tr.payloads[idx[accept]], axis=1)
                self.m.undetected_accepted += int(bad.sum())
            for j, (packet, ok) in enumerate(zip(idx.tolist(), accept.tolist())):
                sent.add(packet)
                st.attempts[packet] += 1
                if not ok:
                    continue
                if st.have[packet]:
                    self.m.redundant += 1
                    continue
                st.have[packet] = True
                st.payload[packet] = pays[k0 + j]
                if st.first_ok[packet] == 0:
                    st.first_ok[packet] = st.attempts[packet]
        for i, (kind, a, j, payload, o, err) in enumerate(tx_meta):
            if kind == "data":
                continue
            if kind == "reply":
                slot = o // lay.slot_ns
                ex = self.exchanges.get(int(slot))
                if ex is None:
                    continue
                heard = not garbled[i] and bool(okm[i]) and int(addrs[i]) == ex.address
                good = heard and bits_to_int(pays[i]) == ex.expected_reply
                if (heard and ex.command.opcode is mac.Opcode.EMERGENCY_NOTICE
                        and bits_to_int(pays[i]) == self.seal.seal(self.server_key, NOTICE_REFUSAL.encode())):
                    good = True
                    self._refused(ex.address)
                self._reply_result(ex, good, t)
            elif kind == "monitor":
                slot = o // lay.slot_ns
                exp = self.monitor["expected"].get(int(slot))
                if exp is None:
                    continue
                good = (not garbled[i] and bool(okm[i]) and int(addrs[i]) == a
                        and bits_to_int(pays[i]) == self._monitor_digest(exp))
                self.monitor["ok"] += int(good)
            elif kind == "digest":
                exp = self.probe["expected"][j] if self.probe else None
                good = (exp is not None and not garbled[i] and bool(okm[i]) and int(addrs[i]) == a
                        and bits_to_int(pays[i]) == exp)
                if self.probe is not None:
                    self.probe["ok"] += int(good)
        # replies never heard count as failures
        heard_reply_slots = {int(m[4] // lay.slot_ns) for m in tx_meta if m[0] == "reply"}
        for slot, ex in self.exchanges.items():
            if slot not in heard_reply_slots:
                self._reply_result(ex, False, t)
        self.exchanges = {}

        if mode is RateMode.FAST:
            self.monitor["n"] += len(self.monitor["expected"])
            self.monitor["frames"] += 1
            self.monitor["expected"] = {}
            if self.monitor["frames"] >= self.sc.monitor_window_frames:
                n_mon = self.monitor["n"]
                if n_mon and mac.probe_verdict(self.monitor["ok"], n_mon, self.sc.probe_threshold) == "stay_slow":
                    self.mode = RateMode.SLOW
                    self.m.downgrades += 1
                    self._log(t, "downgrade", successes=self.monitor["ok"], total=n_mon)
                    self.last_probe_ns = t
                self.monitor.update(ok=0, n=0, frames=0)

        if probe_stage == "digests" and self.probe is not None:
            total = mac.PROBE_DIGESTS
            verdict = mac.probe_verdict(self.probe["ok"], total, self.sc.probe_threshold)
            self.m.probes.append({"t_ns": int(t), "success_fraction": self.probe["ok"] / total,
                                  "verdict": verdict})
            self._log(t, "probe", verdict=verdict, successes=self.probe["ok"], total=total)
            if verdict == "fit_for_fast":
                self.mode = RateMode.FAST
                self.monitor.update(ok=0, n=0, frames=0)
            self.probe = None

        self._build_acks(lay, mode, positions, slot_ok)
        self._after_uplink(t, lay, positions, heard_positions, touched)

    def _monitor_digest(self, exp):
        addr, v = exp
        w = build_packets(self.geometry, [addr], int_to_bits(v, 16)[None, :])[0]
        return mac.probe_digest(w[: self.geometry.data_bits])

    def _build_acks(self, lay, mode, positions, slot_ok):
        if mode is RateMode.SLOW:
            acks = []
            for p, st in enumerate(positions):
                if st is None:
                    acks.append(None)
                    continue
                bits = slot_ok[lay.data_slots(p)]
                acks.append((st.address, mac.ack_word(bits)))
        else:
            acks = []
            for p, st in enumerate(positions):
                ds = lay.data_slots(p)
                for w in range(10):
                    if st is None:
                        acks.append(None)
                        continue
                    bits = slot_ok[ds[16 * w:16 * w + 16]]
                    acks.append((st.address, mac.ack_word(bits)))
        self.pending_acks = acks

    def _after_uplink(self, t, lay, positions, heard_positions, touched):
        # silent positions and false-ACK inference
        for p, st in enumerate(positions):
            if st is None or p in heard_positions:
                continue
            if any(q in heard_positions for q, x in enumerate(positions) if x is st):
                continue
            st.silent_frames += 1
            if st.kind == "emergency" and not st.ever_heard and st.silent_frames >= self.emg.silent_limit:
                # never heard: a false decode, or a sensor that keeps missing its schedule
                st.dropped = True
                self.emg.on_silent_reporter(st.address)
            elif st.silent_frames >= 2 and not st.verified:
                missing = np.flatnonzero(~st.have)[:2]
                for i in missing:
                    self._request_retransmit(st, packet=int(i))
        for st, sent in touched.values():
            st.silent_frames = 0
            if not sent:
                continue
            hi = max(sent)
            skipped = [int(i) for i in np.flatnonzero(~st.have[:hi]) if int(i) not in sent]
            for i in skipped:
                if self._retransmit_pending(st, i):
                    continue
                self.m.false_acks += 1
                self._request_retransmit(st, packet=i)
            self._check_transfer(st, t)
        self.emg.uplink_done()

    def _retransmit_pending(self, st, packet: int) -> bool:
        op = mac.Opcode.RETRANSMIT_REQUEST
        keys = self.control_keys
        a = st.address
        return ((a, op, packet) in keys or (a, op, mac.WHOLE_REPORT) in keys
                or (st.kind == "hourly" and (a, op, mac.BLOCK_FLAG | (packet // st.ppb)) in keys))

    def _request_retransmit(self, st, packet=None, block=None, whole=False):
        arg = mac.retransmit_argument(None if whole else packet, None if whole else block)
        self.m.retransmit_requests += 1
        self._queue_control(st.address, mac.ControlCommand(mac.Opcode.RETRANSMIT_REQUEST, arg), 0)

    def _check_transfer(self, st: ServerTransfer, t):
        if st.verified:
            return
        if st.kind == "hourly":
            ppb = st.ppb
            for b in np.flatnonzero(~st.block_ok):
                sl = slice(b * ppb, (b + 1) * ppb)
                if not st.have[sl].all():
                    continue
                if check_block(st.payload[sl], self.block):
                    st.block_ok[b] = True
                else:
                    st.have[sl] = False
                    st.block_retransmits += 1
                    self.m.block_retransmits += 1
                    self._request_retransmit(st, block=int(b))
            if not st.block_ok.all():
                return
            try:
                reassemble_report(st.payload.reshape(-1, ppb, self.geometry.payload_bits), self.block,
                                  self.geometry, st.report_len, "hourly")
            except (BlockCheckError, ReportCheckError):
                st.have[:] = False
                st.block_ok[:] = False
                st.report_retransmits += 1
                self.m.report_retransmits += 1
                self._request_retransmit(st, whole=True)
                return
        else:
            if not st.have.all():
                return
            try:
                reassemble_report(st.payload.reshape(1, -1, self.geometry.payload_bits), self.block,
                                  self.geometry, st.report_len, "emergency")
            except BlockCheckError:
                st.have[:] = False
                st.report_retransmits += 1
                self.m.report_retransmits += 1
                self._request_retransmit(st, whole=True)
                if self.emg.record is not None:
                    self.emg.record.report_retransmits += 1
                return
        st.verified_ns = t
        self.m.delivered_bits += st.report_len
        self.m.reports.append({
            "address": st.address, "kind": st.kind, "report_id": st.report_id,
            "created_ns": st.created_ns, "verified_ns": t,
            "transmissions": st.transmissions, "attempts_to_delivery": st.attempts_to_delivery(),
            "scheduled_frames": st.scheduled_frames, "slots_assigned": st.slots_assigned,
            "block_retransmits": st.block_retransmits, "report_retransmits": st.report_retransmits,
        })
        if st.kind == "hourly":
            self.m.hourly_completed += 1
            self.last_report_ns[st.address] = t
        else:
            self.emg.on_report_verified(st.address, t, st.attempts_to_delivery(), st.transmissions)
        self._log(t, "report_verified", address=st.address, kind=st.kind)

    def _refused(self, a):
        """A heard address answered that it has no emergency report: a false decode."""
        for st in self.positions:
            if st is not None and st.address == a and st.kind == "emergency" and not st.verified:
                st.dropped = True
        if self.emg.emergency:
            self.emg.on_silent_reporter(a)

    def _reply_result(self, ex, good, t):
        a = ex.address
        if good:
            self.m.heartbeats_verified += 1
            prev = self.hb_last_ok.get(a, 0)
            age = (t - prev) / NS
            self._staleness_bucket(age)
            self.hb_last_ok[a] = t
            self.stale.discard(a)
            if ex.command.opcode is mac.Opcode.TOF_CALIBRATE:
                self.m.tof_calibrations += 1
        else:
            self.m.heartbeats_failed += 1
            self.stale.add(a)
            if ex.command.opcode is not mac.Opcode.HEALTH_CHECK:
                # the command must still get through: retry it
                pri = {mac.Opcode.EMERGENCY_NOTICE: 0, mac.Opcode.RETRANSMIT_REQUEST: 0,
                       mac.Opcode.TOF_CALIBRATE: 1}.get(ex.command.opcode, 2)
                if ex.command.opcode is mac.Opcode.EMERGENCY_NOTICE and not self.emg.emergency:
                    return
                if ex.command.opcode is mac.Opcode.RATE_PROBE:
                    return
                if ex.command.opcode is mac.Opcode.TOF_CALIBRATE:
                    return  # re-measured on the next uplink
                if ex.command.opcode is mac.Opcode.RETRANSMIT_REQUEST and not self._still_missing(a):
                    return
                self._queue_control(a, ex.command, pri)

    def _still_missing(self, a):
        return any(st.address == a and not st.verified for st in self.transfers.values())

    def _staleness_bucket(self, age_s):
        self.m.max_staleness_s = max(self.m.max_staleness_s, age_s)
        for b in STALENESS_BUCKETS_S:
            if age_s <= b:
                self.m.staleness_histogram[str(b)] += 1
                return
        self.m.staleness_histogram["inf"] += 1

    # -- contention -------------------------------------------------------

    def _contention(self, t, f):
        ft, t0, mode, lay, plan, positions, probe_stage = self.frame_plan
        g = self.geometry
        contenders = []
        for a in sorted(self.detected):
            s = self.sensors[a]
            if self._emergency_verified(s):
                self.detected.discard(a)
            elif s.emergency_acked and t - s.waiting_since_ns > RECONTEND_NS:
                # heard long ago but never served: the server may have given up on it
                s.emergency_acked = False
                contenders.append(s)
            elif not s.emergency_acked:
                contenders.append(s)
        heard = []
        lo, _ = lay.contention_window()
        ready = []
        if contenders:
            # each contender reads the slow-rate indicator to find the contention region
            ind = self.channel.broadcast(mac.indicator_bits(mode, probe_stage == "digests")[None, :],
                                         [t0], RateMode.SLOW, [s.address for s in contenders])[:, 0, :]
            for s, v in zip(contenders, decode_indicators(ind).tolist()):
                slay = mac.layout_for(RateMode.FAST if v == 1 else RateMode.SLOW)
                send_lo = slay.contention_window()[0]
                if s.detection_ns <= t0 + send_lo - s.believed_tof_ns:
                    ready.append((s, slay))
        if ready:
            self.m.contention_frames += 1
            self.m.contention_transmissions += len(ready)
            choices = self.cont_rng.integers(0, mac.CONTENTION_SLOTS, size=len(ready))
            words = contention_words([s.address for s, _ in ready], g)
            items = []
            misaligned = []
            slots_used = []
            for (s, slay), c, w in zip(ready, choices, words):
                s.contended = True
                off = int(slay.contention_offsets()[c])
                err = s.timing_error_ns(t0)
                rx = self.channel.transmit_many(w[None, :], [t0 + off], RateMode.SLOW, s.address)[0]
                items.append((int(off + err), mac.HALF_SLOW_NS, rx))
                slots_used.append(off)
                lo_r, hi_r = lay.contention_window()
                misaligned.append(abs(err) > GUARD_NS or not (lo_r <= off and off + mac.HALF_SLOW_NS <= hi_r))
            received, collided = self.channel.overlap_collide(items, tolerance_ns=GUARD_NS)
            keep = [r for r, c, m in zip(received, collided, misaligned) if not c and not m]
            # a collided slot still carries energy: the server decodes one garbled word per slot
            garbled = {}
            for r, c, m, o in zip(received, collided, misaligned, slots_used):
                if c and not m:
                    garbled.setdefault(o, r)
            rows = keep + list(garbled.values())
            if rows:
                heard = self._heard_addresses(np.stack(rows))
        self._heard_now = set(heard)
        before = self.emg.mode
        new = self.emg.on_contention(heard, t, f, self._episode_record)
        if heard or self.emg.mode is not before:
            self._log(t, "contention", frame=f, heard=sorted(heard), mode=self.emg.mode.value)
        for a in new:
            self._queue_control(a, mac.ControlCommand(mac.Opcode.EMERGENCY_NOTICE, 1), 0)
        self.emg.closed = []

    def _heard_addresses(self, rows):
        from .emergency import detect_trigger
        return [a for a in detect_trigger(rows, self.geometry) if a < self.sc.sensors]

    def _emergency_verified(self, s):
        st = self.transfers.get((s.address, "emergency", s.emergency.report_id))
        return st is not None and st.verified

    # -- frame end --------------------------------------------------------

    def _frame_end(self, t, f) -> bool:
        window = int(self.sc.staleness_window_s * NS)
        if self.sc.heartbeat and f % 10 == 0:
            for a, last in self.hb_last_ok.items():
                if t - last > window and a not in self.stale:
                    self.stale.add(a)
                    self.m.stale_flags += 1
        if self.sc.stop_when_idle and self._idle():
            self.m.end_ns = t
            return True
        self.queue.push(t, FRAME_START, f + 1)
        return False

    def _idle(self):
        if self.emg.emergency:
            return False
        if any(not st.verified for st in self.transfers.values()):
            return False
        done = {r.episode_id for r in self.episode_records if r.complete and r.close_ns is not None}
        return all(i in done for i, _, _ in self.pending_episodes)

    def _finish(self, t):
        self.m.end_ns = self.m.end_ns or t
        # queued for an uplink beyond the horizon
        left = sum(len(x[3]) for x in self.inflight if x[0] == "data")
        self.m.in_flight += left
        self.m.sent += left
        self.m.episodes = [r.to_dict() for r in self.episode_records]
        recorded = {e["episode_id"] for e in self.m.episodes}
        for i, members, det in self.pending_episodes:
            if i not in recorded:
                rec = EpisodeRecord(i, list(members), dict(det), self.sc.deadline_s)
                self.m.episodes.append(rec.to_dict())
        self.m.episodes.sort(key=lambda e: (e["episode_id"], e["trigger_ns"] or 0))
        if not self.m.conservation_ok():
            raise InvariantViolation("packet counters do not conserve", self.trace[-50:])
        if self.m.preemption_violations:
            raise InvariantViolation("hourly data scheduled during emergency mode", self.trace[-50:])


def run(scenario: Scenario) -> Metrics:
    return Simulation(scenario).run()


TRACE_COLUMNS = ("t_ns", "event", "detail")


def trace_rows(trace) -> list[dict]:
    """Flatten trace records for CSV: time, event name and the remaining fields as JSON."""
    rows = []
    for rec in trace:
        rest = {k: v for k, v in rec.items() if k not in ("t_ns", "event")}
        rows.append({"t_ns": rec["t_ns"], "event": rec["event"],
                     "detail": json.dumps(rest, sort_keys=True, separators=(",", ":"))})
    return rows


# --- batches --------------------------------------------------------------

def _run_one(args):
    sc_dict, seed = args
    sc = scenario_from_dict(sc_dict)
    sc.seed = seed
    return run(sc).to_dict()


def replication_seeds(seed: int, n: int) -> list[int]:
    return [derive_seed(seed, STREAM_REPLICATION, i) for i in range(n)]


def mean_ci(values, z: float = 1.96) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return {"n": 0, "mean": None, "ci95": None}
    m = float(v.mean())
    half = float(z * v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return {"n": int(v.size), "mean": m, "ci95": [m - half, m + half]}


def wilson_ci(k: int, n: int, z: float = 1.96):
    if n == 0:
        return None
    p = k / n
    d = 1 + z * z / n
    c = (p + z * z / (2 * n)) / d
    h = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / d
    return [c - h, c + h]


def run_batch(template: Scenario, seeds, workers: int = 1, keep_runs: bool = False) -> dict:
    """Independent replications of ``template``, one per seed, in seed order.

    Results do not depend on ``workers``: every replication owns its
    substreams, and aggregation happens after collection in seed order.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        return {"runs": 0}
    base = template.to_dict()
    args = [(base, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            runs = list(ex.map(_run_one, args, chunksize=max(1, len(args) // (4 * workers))))
    else:
        runs = [_run_one(a) for a in args]
    sent = sum(r["sent"] for r in runs)
    acked = sum(r["acked"] for r in runs)
    eps = [e for r in runs for e in r["episodes"]]
    out = {
        "runs": len(runs),
        "seeds": seeds,
        "packet_success": {"acked": acked, "sent": sent,
                           "fraction": acked / sent if sent else None,
                           "ci95": wilson_ci(acked, sent)},
        "goodput_bps": mean_ci([r["summary"]["goodput_bps"] for r in runs]),
        "hourly_completed": sum(r["hourly_completed"] for r in runs),
        "hourly_generated": sum(r["hourly_generated"] for r in runs),
        "episodes": episode_summary(eps),
    }
    if keep_runs:
        out["run_metrics"] = runs
    return out


def episode_summary(episodes) -> dict:
    n = len(episodes)
    if n == 0:
        return {"count": 0}
    met = sum(bool(e["deadline_met"]) for e in episodes)
    lat = [e["latency_s"] if e["latency_s"] is not None else math.inf for e in episodes]
    rec = [e["recognition_s"] if e["recognition_s"] is not None else math.inf for e in episodes]
    close = [e["latency_with_close_s"] if e["latency_with_close_s"] is not None else math.inf for e in episodes]
    coll = [e["collection_s"] for e in episodes if e["collection_s"] is not None]
    att = [a for e in episodes for a in e["attempts_to_delivery"] if a is not None]
    trans = [a for e in episodes for a in e["transmissions"] if a is not None]

    def pct(v, q):
        if not v:
            return None
        x = float(np.percentile(np.asarray(v, dtype=float), q, method="inverted_cdf"))
        return x if math.isfinite(x) else None  # None: beyond the slowest completed episode

    return {
        "count": n,
        "deadline_met": met,
        "compliance": met / n,
        "compliance_ci95": wilson_ci(met, n),
        "latency_p50_s": pct(lat, 50),
        "latency_p99_s": pct(lat, 99),
        "latency_p999_s": pct(lat, 99.9),
        "latency_max_s": max(lat) if math.isfinite(max(lat)) else None,
        "incomplete": sum(not math.isfinite(x) for x in lat),
        "latency_with_close_p999_s": pct(close, 99.9),
        "collection_p999_s": pct(coll, 99.9),
        "recognition_p50_s": pct(rec, 50),
        "recognition_p999_s": pct(rec, 99.9),
        "recognition_over_3s": sum(r > 3.0 for r in rec) / n,
        "discovered_within_two_periods": sum(bool(e["discovered_within_two_periods"]) for e in episodes) / n,
        "mean_attempts_per_report": float(np.mean(att)) if att else None,
        "attempts_reports": len(att),
        "attempts_se": float(np.std(att, ddof=1) / math.sqrt(len(att))) if len(att) > 1 else None,
        "mean_transmissions_per_report": float(np.mean(trans)) if trans else None,
        "phantoms": sum(len(e["phantoms"]) for e in episodes),
    }


def episode_scenario(contenders: int = 16, rate: str = "worst", **kw) -> Scenario:
    """A short run holding one emergency episode and nothing else."""
    fast = rate == "fast"
    ch = ChannelParams(rate_schedule=[(0.0, "fast" if fast else "slow")])
    base = dict(
        channel=ch,
        initial_mode="fast" if fast else "slow",
        hourly=HourlySpec(enabled=False),
        contenders=ContenderSpec(count=contenders),
        episodes=[1.0],
        horizon_s=60.0,
        probe_interval_s=None,
        stop_when_idle=True,
    )
    base.update(kw)
    return Scenario(**base)


def _episode_one(args):
    contenders, rate, seed, extra = args
    rng = substream(seed, STREAM_SCENARIO, "phase")
    t = 1.0 + float(rng.random())
    sc = episode_scenario(contenders, rate, seed=seed, episodes=[t], **extra)
    m = run(sc)
    return m.episodes


def run_episodes(count: int, contenders: int = 16, rate: str = "worst", seed: int = 0,
                 workers: int = 1, **extra) -> dict:
    """``count`` independent single-episode runs; the detection phase within a frame is random."""
    seeds = replication_seeds(seed, count)
    args = [(contenders, rate, s, extra) for s in seeds]
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            res = list(ex.map(_episode_one, args, chunksize=max(1, count // (8 * workers))))
    else:
        res = [_episode_one(a) for a in args]
    eps = [e for r in res for e in r]
    out = episode_summary(eps)
    out.update({"contenders": contenders, "rate": rate, "seed": seed})
    return out


# --- Monte-Carlo oracles ----------------------------------------------------

def error_patterns(n: int, length: int, ber: float, rng: np.random.Generator) -> np.ndarray:
    return flip_bits(np.zeros((n, length), dtype=np.uint8), ber, rng)


def packet_error_mc(n_packets: int, ber: float = 1e-2, seed: int = 0, packet_len: int = 32,
                    network_size: int = 1000, chunk: int = 1 << 20) -> dict:
    """Channel-driven error patterns through the real packet check.

    The check is linear, so whether a corruption is caught depends only on
    the error pattern; the transmitted content is irrelevant.
    """
    g = sizing(network_size, packet_len)
    code = packet_code(g)
    rng = substream(seed, STREAM_CHANNEL, "packet_mc")
    clean = even4 = undetected = 0
    undetected_weights = {}
    done = 0
    while done < n_packets:
        b = min(chunk, n_packets - done)
        e = error_patterns(b, packet_len, ber, rng)
        w = e.sum(axis=1)
        clean += int((w == 0).sum())
        even4 += int(((w >= 4) & (w % 2 == 0)).sum())
        hit = e[w > 0]
        miss = hit[code.passes(hit)]
        undetected += len(miss)
        for ww in miss.sum(axis=1).tolist():
            undetected_weights[ww] = undetected_weights.get(ww, 0) + 1
        done += b
    return {"packets": n_packets, "clean": clean, "even_weight_ge4": even4,
            "undetected": undetected, "undetected_weights": undetected_weights}


def report_transfer_mc(n_reports: int, ber: float = 1e-2, seed: int = 0, kind: str = "hourly",
                       undetected: str = "code", network_size: int = 1000) -> dict:
    """Selective retransmission of whole reports over a Bernoulli channel.

    Every packet is resent until its check passes; a block is resent when
    its check fails.  ``undetected='code'`` uses the real packet and block
    checks (an accepted packet with a corrupted address is rejected, as the
    server would); ``'bound'`` treats every even-weight (>= 4) corruption as
    an undetected packet error that only the block check catches.
    """
    g = sizing(network_size, 32)
    blk = block_sizing(512, g)
    pcode = packet_code(g)
    bcode = block_code(blk)
    rng = substream(seed, STREAM_CHANNEL, "report_mc", kind, undetected)
    ppb = blk.packets_per_block if kind == "hourly" else 32
    n_blocks = (HOURLY_REPORT_BITS + 15 + blk.info_bits - 1) // blk.info_bits if kind == "hourly" else 1
    npk = n_blocks * ppb
    sent = np.zeros(n_reports, dtype=np.int64)
    block_resends = 0
    # outstanding blocks: (report, block) pairs still to be delivered
    todo_r = np.repeat(np.arange(n_reports), n_blocks)
    while todo_r.size:
        m = todo_r.size
        pending = np.ones((m, ppb), dtype=bool)
        err_payload = np.zeros((m, ppb, g.payload_bits), dtype=np.uint8)
        while pending.any():
            rows, cols = np.nonzero(pending)
            e = error_patterns(rows.size, 32, ber, rng)
            np.add.at(sent, todo_r[rows], 1)
            w = e.sum(axis=1)
            if undetected == "code":
                passes = pcode.passes(e)
                addr_hit = e[:, : g.address_bits].any(axis=1)
                accept = passes & ~addr_hit
            else:
                accept = (w == 0) | ((w >= 4) & (w % 2 == 0))
            acc = np.flatnonzero(accept)
            pending[rows[acc], cols[acc]] = False
            err_payload[rows[acc], cols[acc]] = e[acc, g.address_bits: g.data_bits]
        flat = err_payload.reshape(m, -1)
        dirty = flat.any(axis=1)
        if undetected == "code" and kind == "hourly":
            caught = dirty & ~bcode.passes(flat[:, : blk.block_len])
        else:
            caught = dirty
        block_resends += int(caught.sum())
        todo_r = todo_r[caught]
    return {"reports": n_reports, "packets_per_report": npk,
            "mean_transmissions": float(sent.mean()),
            "se": float(sent.std(ddof=1) / math.sqrt(n_reports)) if n_reports > 1 else 0.0,
            "block_resends": block_resends,
            "block_resend_rate": block_resends / (n_reports * n_blocks)}


def block_goodput_mc(packet_len: int, ber: float, n_blocks: int = 100_000, seed: int = 0,
                     block_len: int = 512, rate: float = 4096.0, undetected: str = "bound",
                     network_size: int = 1000) -> dict:
    """Long-run goodput of block delivery with per-packet and per-block checks.

    Goodput is block info bits delivered per second of airtime.
    """
    g = sizing(network_size, packet_len)
    blk = block_sizing(block_len, g)
    code = packet_code(g)
    rng = substream(seed, STREAM_CHANNEL, "goodput_mc", packet_len, int(ber * 1e6), undetected)
    ppb = blk.packets_per_block
    packets = 0
    delivered = 0
    left = n_blocks
    while left:
        m = left
        pending = np.ones((m, ppb), dtype=bool)
        dirty = np.zeros(m, dtype=bool)
        while pending.any():
            rows, cols = np.nonzero(pending)
            e = error_patterns(rows.size, packet_len, ber, rng)
            packets += rows.size
            w = e.sum(axis=1)
            if undetected == "code":
                accept = code.passes(e) & ~e[:, : g.address_bits].any(axis=1)
            else:
                accept = (w == 0) | ((w >= 4) & (w % 2 == 0))
            acc = np.flatnonzero(accept)
            pending[rows[acc], cols[acc]] = False
            bad = acc[w[acc] > 0]
            dirty[rows[bad]] = True
        delivered += int((~dirty).sum())
        left = int(dirty.sum())
    seconds = packets * packet_len / rate
    return {"packet_len": packet_len, "ber": ber, "blocks": n_blocks, "packets": packets,
            "goodput_bps": delivered * blk.info_bits / seconds}


def goodput_drop_table(ber_lo: float = 1e-2, ber_hi: float = 1.1e-2, n_blocks: int = 200_000,
                       seed: int = 0) -> list[dict]:
    """Relative goodput loss from ``ber_lo`` to ``ber_hi``: closed form, simulation and reference values."""
    reference = {32: 0.018, 64: 0.041}
    rows = []
    for lp in (32, 64):
        lo = block_goodput_mc(lp, ber_lo, n_blocks, seed)
        hi = block_goodput_mc(lp, ber_hi, n_blocks, seed + 1)
        rows.append({
            "packet_len": lp,
            "closed_form_drop": ber_drop(lp),
            "simulated_drop": 1 - hi["goodput_bps"] / lo["goodput_bps"],
            "reference_drop": reference[lp],
            "simulated_goodput_lo": lo["goodput_bps"],
            "simulated_goodput_hi": hi["goodput_bps"],
        })
    return rows
