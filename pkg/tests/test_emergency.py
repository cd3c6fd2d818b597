import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfsense.codec import half_geometry, parse_packets, sizing
from hfsense.emergency import (
    ALLOWED,
    EmergencyError,
    EmergencyState,
    EpisodeRecord,
    Mode,
    clean_slots,
    contend,
    contention_words,
    detect_trigger,
    discovery_probability_mc,
    false_trigger_bound,
    worst_case_collection_s,
)

G = sizing(1000, 32)
NS = 10 ** 9


def _record(contenders=(1, 2)):
    def make(t_ns, frame):
        return EpisodeRecord(0, list(contenders), {a: 0 for a in contenders})
    return make


def test_full_episode_walks_the_modes():
    st_ = EmergencyState()
    assert st_.on_contention([], 0, 0) == []
    assert st_.mode is Mode.NORMAL
    assert st_.on_contention([1], NS, 1, _record()) == [1]
    assert st_.mode is Mode.DISCOVERY
    assert st_.record.trigger_ns == NS
    assert st_.on_contention([2, 1], 2 * NS, 2) == [2]
    st_.on_contention([], 3 * NS, 3)
    assert st_.mode is Mode.COLLECTION
    for t, a in ((4, 1), (5, 2)):
        assert st_.next_reporter() == a
        st_.on_scheduled(a, t * NS)
        st_.on_report_verified(a, t * NS + 1, attempts=40, transmissions=50)
    assert st_.mode is Mode.FINAL_POLL
    rec = st_.record
    st_.on_contention([], 6 * NS, 6)
    assert st_.mode is Mode.NORMAL
    assert rec.complete and rec.close_ns == 6 * NS
    assert rec.latency_s == pytest.approx(5.0)
    assert rec.recognition_s == 1.0
    assert rec.deadline_met
    assert rec.discovered_within()
    assert st_.history == [Mode.NORMAL, Mode.DISCOVERY, Mode.COLLECTION, Mode.FINAL_POLL, Mode.NORMAL]


def test_straggler_in_final_poll_reopens_collection():
    st_ = EmergencyState()
    st_.on_contention([1], 0, 0, _record((1, 3)))
    st_.on_contention([], NS, 1)
    st_.on_contention([], 2 * NS, 2)
    st_.next_reporter()
    st_.on_report_verified(1, 3 * NS)
    assert st_.mode is Mode.FINAL_POLL
    assert st_.on_contention([3], 4 * NS, 4) == [3]
    assert st_.mode is Mode.COLLECTION
    assert st_.record.final_polls == 1


def test_phantom_reporter_is_dropped():
    st_ = EmergencyState()
    st_.on_contention([1, 77], 0, 0, _record((1,)))
    st_.on_contention([], NS, 1)
    st_.on_contention([], 2 * NS, 2)
    assert st_.next_reporter() == 1
    st_.on_report_verified(1, 3 * NS)
    assert st_.next_reporter() == 77
    st_.on_silent_reporter(77)
    assert st_.mode is Mode.FINAL_POLL
    assert st_.record.phantoms == [77]
    assert st_.next_reporter() is None


@settings(max_examples=200, deadline=None)
@given(path=st.lists(st.sampled_from(list(Mode)), max_size=8))
def test_only_listed_transitions_are_accepted(path):
    s = EmergencyState()
    for m in path:
        if m in ALLOWED[s.mode]:
            s._go(m)
        else:
            with pytest.raises(EmergencyError):
                s._go(m)
    for a, b in zip(s.history, s.history[1:]):
        assert b in ALLOWED[a]


def test_incomplete_record():
    rec = EpisodeRecord(0, [1, 2], {1: 0, 2: NS})
    rec.verified_ns[1] = 3 * NS
    assert not rec.complete
    assert rec.latency_s is None and not rec.deadline_met
    d = rec.to_dict()
    assert d["verified_ns"] == [3 * NS, None]
    assert d["first_detection_ns"] == 0


def test_late_episode_misses_deadline():
    rec = EpisodeRecord(0, [1], {1: 0})
    rec.verified_ns[1] = 15 * NS
    assert rec.deadline_met
    rec.verified_ns[1] = 15 * NS + 1
    assert not rec.deadline_met


def test_clean_slots():
    assert clean_slots([0, 0, 3, 5, 5, 7]).tolist() == [3, 7]
    assert clean_slots([]).tolist() == []
    c = contend(16, np.random.default_rng(0))
    assert c.min() >= 0 and c.max() < 16


def test_detect_trigger():
    words = contention_words([5, 900, 5], G)
    assert detect_trigger(words, G) == [5, 900]
    assert detect_trigger(words, G, known_addresses={5}) == [5]
    bad = words.copy()
    bad[0, 3] ^= 1
    assert detect_trigger(bad, G) == [900, 5]
    assert detect_trigger(np.zeros((0, 16)), G) == []


def test_noise_rarely_triggers():
    n = 1_000_000
    known = set(range(1000))
    rows = np.random.default_rng(9).integers(0, 2, (n, 16), dtype=np.uint8)
    ok, addr, _ = parse_packets(rows, half_geometry(G))
    hits = int((ok & (addr < 1000)).sum())
    p = false_trigger_bound(G, len(known))
    assert p == pytest.approx(2 ** -6 * 1000 / 1024)
    assert abs(hits - n * p) < 3 * math.sqrt(n * p * (1 - p))
    got = detect_trigger(rows[:20_000], G, known)
    assert got and len(got) == len(set(got)) and all(a in known for a in got)


def test_discovery_two_contenders():
    rng = np.random.default_rng(4)
    for periods, exact in ((0, 15 / 16), (1, 1 - 1 / 256)):
        trials = 40_000
        p = discovery_probability_mc(2, periods, trials, rng)
        assert abs(p - exact) < 3 * math.sqrt(exact * (1 - exact) / trials) + 1e-9


def test_discovery_of_sixteen_improves_with_time():
    rng = np.random.default_rng(5)
    ps = [discovery_probability_mc(16, k, 2000, rng) for k in (0, 2, 6)]
    assert ps[0] < 0.01
    assert ps[0] <= ps[1] <= ps[2]
    assert ps[2] > 0.5


def test_collection_budget():
    assert worst_case_collection_s() == pytest.approx(4 * 60 / 16)
    assert worst_case_collection_s(16, 44.14) < 12
