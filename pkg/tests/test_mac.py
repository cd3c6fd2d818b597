from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfsense import mac
from hfsense.channel import NS, Channel, ChannelParams, RateMode
from hfsense.codec import build_packet, half_geometry, int_to_bits, parse_packet, sizing
from hfsense.mac import (
    FAST_LAYOUT,
    SLOW_LAYOUT,
    ControlCommand,
    MacError,
    Opcode,
    Region,
    ToySeal,
)

G = sizing(1000, 32)
GOLDEN = Path(__file__).parent / "golden"


@pytest.mark.parametrize("lay", [SLOW_LAYOUT, FAST_LAYOUT], ids=["slow", "fast"])
def test_frame_adds_up_to_one_second(lay):
    assert lay.total_ns() == 10 ** 9
    assert lay.slot_ns * lay.slot_count == 10 ** 9
    mac.check_frame_accounting(lay)
    assert lay.region(Region.CONTENTION).rate is RateMode.SLOW
    assert lay.region(Region.INDICATOR).rate is RateMode.SLOW


@pytest.mark.parametrize("lay", [SLOW_LAYOUT, FAST_LAYOUT], ids=["slow", "fast"])
def test_contention_region_holds_sixteen_slow_halves(lay):
    lo, hi = lay.contention_window()
    assert hi - lo == 16 * mac.HALF_SLOW_NS
    offs = lay.contention_offsets()
    assert offs.size == 16
    assert all(mac.contention_lands_in_region(int(o), lay) for o in offs)
    assert RateMode.SLOW.duration_ns(16) == mac.HALF_SLOW_NS


def test_broken_layout_is_rejected():
    bad = mac.FrameLayout(RateMode.SLOW, mac.SLOW_SLOT_NS, 128, SLOW_LAYOUT.regions[:-1])
    with pytest.raises(MacError):
        mac.check_frame_accounting(bad)


@pytest.mark.parametrize("lay", [SLOW_LAYOUT, FAST_LAYOUT], ids=["slow", "fast"])
def test_positions_partition_the_data_slots(lay):
    slots = np.concatenate([lay.data_slots(p) for p in range(mac.POSITIONS)])
    assert slots.size == mac.POSITIONS * lay.packets_per_position
    assert np.unique(slots).size == slots.size
    kind = Region.SENSOR if lay.mode is RateMode.SLOW else Region.DATA
    r = lay.region(kind)
    assert slots.min() >= r.start and slots.max() <= r.end
    assert not np.isin(slots, lay.reply_slots()).any()


def test_data_slots_per_second():
    assert SLOW_LAYOUT.packets_per_position * mac.POSITIONS == 80
    assert FAST_LAYOUT.packets_per_position * mac.POSITIONS == 800


def test_probe_displaces_eight_slow_data_packets():
    total = sum(int(mac.probe_displaced(p).sum()) for p in range(mac.POSITIONS))
    assert total == len(mac.PROBE_SLOW_SLOTS) == 8


@settings(max_examples=200, deadline=None)
@given(word=st.integers(0, 0xFFFF), key=st.binary(min_size=16, max_size=16))
def test_seal_is_a_bijection(word, key):
    s = ToySeal()
    assert s.unseal(key, s.seal(key, word)) == word
    assert 0 <= s.seal(key, word) <= 0xFFFF


def test_seal_permutes_the_whole_word_space():
    s = ToySeal()
    key = mac.sensor_key(1, 2)
    assert len({s.seal(key, w) for w in range(1 << 16)}) == 1 << 16


@settings(max_examples=200, deadline=None)
@given(op=st.sampled_from(list(Opcode)), arg=st.integers(0, (1 << 13) - 1))
def test_control_roundtrip(op, arg):
    c = ControlCommand(op, arg)
    assert ControlCommand.decode(c.encode()) == c


def test_control_rejects_bad_words():
    assert ControlCommand.decode(7 << 13) is None
    with pytest.raises(MacError):
        ControlCommand(Opcode.HEALTH_CHECK, 1 << 13)


@settings(max_examples=200, deadline=None)
@given(ticks=st.integers(-4096, 4095))
def test_tof_delta_roundtrip(ticks):
    ns = ticks * mac.TOF_TICK_NS
    assert mac.decode_tof_delta(mac.encode_tof_delta(ns)) == ns


def test_tof_delta_saturates_and_rounds():
    assert mac.decode_tof_delta(mac.encode_tof_delta(1e9)) == 4095 * mac.TOF_TICK_NS
    assert mac.decode_tof_delta(mac.encode_tof_delta(-1e9)) == -4096 * mac.TOF_TICK_NS
    assert mac.decode_tof_delta(mac.encode_tof_delta(7_400)) == 5_000


def test_retransmit_arguments():
    assert mac.parse_retransmit(mac.retransmit_argument()) == ("report", -1)
    assert mac.parse_retransmit(mac.retransmit_argument(block=20)) == ("block", 20)
    assert mac.parse_retransmit(mac.retransmit_argument(index=671)) == ("packet", 671)


def test_heartbeat_roundtrip_clean_and_tampered():
    skey, srv = mac.sensor_key(0, 9), mac.server_key(0)
    cmd = ControlCommand(Opcode.HEALTH_CHECK, 77)
    assert mac.heartbeat_roundtrip(cmd, 9, skey, srv, G)
    ex = mac.HeartbeatExchange.create(9, cmd, skey, srv)
    good = build_packet(G, 9, int_to_bits(ex.expected_reply, 16))
    assert mac.verify_reply(good, G, ex)
    forged = build_packet(G, 9, int_to_bits(cmd.encode(), 16))
    assert not mac.verify_reply(forged, G, ex)
    # the wrong key unseals to a different word
    other, _ = mac.sensor_respond(ex.sealed, mac.sensor_key(0, 10), srv)
    assert other != cmd


def test_heartbeat_over_a_noisy_channel_sometimes_fails():
    ch = Channel(ChannelParams(ber=0.05), np.random.default_rng(3))
    skey, srv = mac.sensor_key(0, 9), mac.server_key(0)
    cmd = ControlCommand(Opcode.HEALTH_CHECK, 1)
    ok = [mac.heartbeat_roundtrip(cmd, 9, skey, srv, G, ch) for _ in range(400)]
    # both directions must survive: about 0.95^64
    assert 0.01 < np.mean(ok) < 0.1


def test_probe_verdict():
    assert mac.probe_verdict(12, 40) == "fit_for_fast"
    assert mac.probe_verdict(11, 40) == "stay_slow"
    assert mac.probe_verdict(0, 0) == "stay_slow"


def test_probe_digest_is_crc16():
    # standard check vector: CRC-16/CCITT-FALSE of "123456789"
    bits = np.unpackbits(np.frombuffer(b"123456789", dtype=np.uint8))
    assert mac.probe_digest(bits) == 0x29B1


@pytest.mark.parametrize("mode", list(RateMode))
def test_indicator_roundtrip(mode):
    for probe in (False, True):
        got_mode, got_probe = mac.decode_indicator(mac.indicator_bits(mode, probe))
        assert got_probe == probe
        if not probe:
            assert got_mode is mode


def test_indicator_survives_a_few_flips():
    bits = mac.indicator_bits(RateMode.FAST)
    bits[:5] ^= 1
    assert mac.decode_indicator(bits) == (RateMode.FAST, False)


def _golden_plans():
    slow = mac.build_server_broadcast(7, [3, None, 500, 17, 998],
                                      [(3, 0xFFFF), None, (500, 0x8001), None, (998, 0)],
                                      [(17, 0x1234), (3, 0xBEEF)], "slow", G)
    fast = mac.build_server_broadcast(8, [1, 2, 3, None, 5], [(1, 0xAAAA)] + [None] * 9 + [(2, 0x5555)] + [None] * 39,
                                      [(3, 0x0F0F)], "fast", G, heartbeats=[(4, 0x1111)])
    return slow, fast


def test_broadcast_matches_golden():
    slow, fast = _golden_plans()
    assert mac.serialize_plan(slow) == (GOLDEN / "plan_slow.txt").read_text()
    assert mac.serialize_plan(fast) == (GOLDEN / "plan_fast.txt").read_text()


def test_slow_broadcast_fits_its_regions():
    slow, _ = _golden_plans()
    lo = SLOW_LAYOUT.region(Region.BROADCAST).start * mac.SLOW_SLOT_NS
    hi = (SLOW_LAYOUT.region(Region.BROADCAST).end + 1) * mac.SLOW_SLOT_NS
    for e in slow.of_kind("schedule") + slow.of_kind("ack"):
        assert lo <= e.offset_ns and e.offset_ns + RateMode.SLOW.duration_ns(e.bits.size) <= hi
    assert len(slow.of_kind("schedule")) == 10
    assert len(slow.of_kind("ack")) == 9
    # emissions never overlap
    spans = sorted((e.offset_ns, e.offset_ns + e.rate.duration_ns(e.bits.size)) for e in slow.emissions)
    assert all(a1 <= b0 for (_, a1), (b0, _) in zip(spans, spans[1:]))


def test_broadcast_limits():
    with pytest.raises(MacError):
        mac.build_server_broadcast(0, [None] * 4, [None] * 5, [], "slow", G)
    with pytest.raises(MacError):
        mac.build_server_broadcast(0, [None] * 5, [None] * 5, [(1, 0)] * 5, "slow", G)
    with pytest.raises(MacError):
        mac.build_server_broadcast(0, [None] * 5, [None] * 50, [], "fast", G, heartbeats=[(1, 0)] * 3)


def test_schedule_decoding_from_either_copy():
    slow, _ = _golden_plans()
    es, rows = slow.stacked("schedule")
    assert mac.decode_schedule(rows, G, 500) == 2
    assert mac.decode_schedule(rows, G, 4) is None
    rows = rows.copy()
    rows[2, 0] ^= 1  # first copy of position 2 damaged
    assert mac.decode_schedule(rows, G, 500) == 2
    many = mac.decode_schedule_many(np.stack([rows, rows]), G, [17, 42])
    assert many.tolist() == [3, -1]


def test_ack_decoding():
    mask = np.zeros(16, dtype=bool)
    mask[[0, 5, 15]] = True
    word = mac.ack_word(mask)
    w = build_packet(G, 12, int_to_bits(word, 16))
    bad = w.copy()
    bad[3] ^= 1
    assert np.array_equal(mac.decode_ack_nak(np.stack([bad, w]), G, 12), mask)
    assert not mac.decode_ack_nak(np.stack([bad]), G, 12).any()
    assert not mac.decode_ack_nak(np.stack([w]), G, 13).any()


def test_slow_contention_half_parses_in_a_fast_frame():
    # a sensor on the slow rate sends its half-packet in the fast frame's slow contention region
    half = half_geometry(G)
    w = build_packet(half, 321, np.zeros(0, dtype=np.uint8))
    ch = Channel(ChannelParams(rate_schedule=[(0.0, "fast")], ber=0.0), np.random.default_rng(0))
    off = int(FAST_LAYOUT.contention_offsets()[5])
    assert mac.contention_lands_in_region(off, FAST_LAYOUT)
    rx = ch.transmit_many(w[None, :], [NS + off], RateMode.SLOW, 321)[0]
    assert parse_packet(rx, G).address == 321
