import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfsense.codec import (
    EMERGENCY_REPORT_BITS,
    HOURLY_REPORT_BITS,
    REPORT_CRC_POLY,
    BlockCheckError,
    CodecError,
    ReportCheckError,
    SizingError,
    bits_to_int,
    block_code,
    block_sizing,
    build_half_packet,
    build_packet,
    build_packets,
    check_length,
    final_block_fill,
    half_geometry,
    int_to_bits,
    packet_code,
    parse_packet,
    parse_packets,
    reassemble_report,
    report_code,
    required_packets,
    segment_report,
    sizing,
)

G = sizing(1000, 32)
B = block_sizing(512, G)


def test_geometry_of_the_baseline():
    assert (G.packet_len, G.address_bits, G.payload_bits, G.crc_bits) == (32, 10, 16, 6)
    assert half_geometry(G).packet_len == 16
    assert (B.block_len, B.crc_bits, B.info_bits, B.packets_per_block) == (512, 10, 502, 32)


def test_sizing_rejects_tiny_packets():
    with pytest.raises(SizingError):
        sizing(1000, 14)
    with pytest.raises(SizingError):
        sizing(1, 32)


@pytest.mark.parametrize("length,bits", [(16, 5), (32, 6), (33, 7), (64, 7), (512, 10), (1000, 11)])
def test_check_length(length, bits):
    assert check_length(length) == bits


def test_report_geometry():
    assert required_packets(HOURLY_REPORT_BITS, B, G) == 21 * 32
    assert required_packets(EMERGENCY_REPORT_BITS, B, G) == 32
    fill = final_block_fill()
    assert fill["blocks"] == 21
    assert fill["report_fraction"] == pytest.approx(200 / 502)
    assert fill["with_report_crc_fraction"] == pytest.approx(215 / 502)


def _poly_residues(g: int, r: int, n: int) -> list[int]:
    # x^i mod g for i < n, computed bit by bit
    out, v = [], 1
    for _ in range(n):
        out.append(v)
        v <<= 1
        if v >> r:
            v ^= g
    return out


def _has_low_weight_codeword(res: list[int]) -> bool:
    n = len(res)
    r = np.array(res, dtype=np.int64)
    if len(set(res)) < n:
        return True  # two positions share a residue: a 2-flip goes unseen
    lookup = np.full(int(r.max()) + 1 if n else 1, -1, dtype=np.int64)
    lookup[r] = np.arange(n)
    for i in range(n):
        x = r[i] ^ r[i + 1:]
        idx = np.where(x < lookup.size, lookup[np.minimum(x, lookup.size - 1)], -1)
        if np.any(idx > i):
            return True
    return False


@pytest.mark.parametrize("r,n", [(6, 32), (10, 512)])
def test_no_polynomial_crc_reaches_hd4(r, n):
    # every degree-r generator with a constant term leaves some 2- or 3-flip undetected
    for low in range(1 << (r - 1)):
        g = (1 << r) | (low << 1) | 1
        assert _has_low_weight_codeword(_poly_residues(g, r, n)), hex(g)


def test_packet_check_catches_every_one_two_three_flip():
    rng = np.random.default_rng(7)
    code = packet_code(G)
    bases = build_packets(G, rng.integers(0, 1000, 8), rng.integers(0, 2, (8, 16)))
    patterns = []
    for w in (1, 2, 3):
        for pos in itertools.combinations(range(32), w):
            e = np.zeros(32, dtype=np.uint8)
            e[list(pos)] = 1
            patterns.append(e)
    patterns = np.array(patterns)
    assert len(patterns) == 32 + 496 + 4960
    for base in bases:
        assert code.passes(base[None, :])[0]
        assert not code.passes(base ^ patterns).any()


def test_block_check_catches_every_one_two_three_flip():
    code = block_code(B)
    cols = np.concatenate([code.columns, 1 << np.arange(B.crc_bits - 1, -1, -1)])
    assert cols.size == 512
    assert np.all(cols != 0)
    assert len(set(cols.tolist())) == 512
    # three distinct columns never cancel: checked for every triple
    where = np.full(1 << B.crc_bits, -1, dtype=np.int64)
    where[cols] = np.arange(512)
    for i in range(512):
        k = where[cols[i] ^ cols[i + 1:]]
        assert not np.any(k > np.arange(i + 1, 512))
    # and on sampled base blocks through the real check
    rng = np.random.default_rng(11)
    info = rng.integers(0, 2, (64, B.info_bits), dtype=np.uint8)
    blocks = np.concatenate([info, code.compute(info)], axis=1)
    assert code.passes(blocks).all()
    for w in (1, 2, 3):
        hit = blocks.copy()
        for row in hit:
            row[rng.choice(512, w, replace=False)] ^= 1
        assert not code.passes(hit).any()


def test_an_undetected_four_flip_exists():
    code = packet_code(G)
    cols = np.concatenate([code.columns, 1 << np.arange(G.crc_bits - 1, -1, -1)]).tolist()
    found = None
    for quad in itertools.combinations(range(32), 4):
        if cols[quad[0]] ^ cols[quad[1]] ^ cols[quad[2]] ^ cols[quad[3]] == 0:
            found = quad
            break
    assert found is not None
    word = build_packet(G, 321, int_to_bits(0xBEEF, 16))
    bad = word.copy()
    bad[list(found)] ^= 1
    assert parse_packet(bad, G) is not None


@settings(max_examples=200, deadline=None)
@given(addr=st.integers(0, 1023), payload=st.integers(0, 0xFFFF))
def test_packet_roundtrip(addr, payload):
    w = build_packet(G, addr, int_to_bits(payload, 16))
    d = parse_packet(w, G)
    assert d is not None and d.address == addr and d.payload_int() == payload
    ok, a, p = parse_packets(w[None, :], G)
    assert ok[0] and a[0] == addr and bits_to_int(p[0]) == payload


@settings(max_examples=200, deadline=None)
@given(addr=st.integers(0, 1023), payload=st.integers(0, 0xFFFF),
       flips=st.sets(st.integers(0, 31), min_size=1, max_size=3))
def test_few_flips_never_parse(addr, payload, flips):
    w = build_packet(G, addr, int_to_bits(payload, 16))
    w[list(flips)] ^= 1
    assert parse_packet(w, G) is None


@settings(max_examples=100, deadline=None)
@given(addr=st.integers(0, 1023))
def test_half_packet_roundtrip(addr):
    w = build_half_packet(G, addr)
    assert w.size == 16
    assert parse_packet(w, G).address == addr


def test_parse_rejects_wrong_lengths():
    with pytest.raises(CodecError):
        parse_packet(np.zeros(20, dtype=np.uint8), G)
    with pytest.raises(CodecError):
        build_packet(G, 1024, np.zeros(16, dtype=np.uint8))
    with pytest.raises(CodecError):
        build_packet(G, 1, np.zeros(15, dtype=np.uint8))


def test_report_crc_polynomial():
    code = report_code(HOURLY_REPORT_BITS)
    assert code.r == 15
    # (x + 1) factor: every odd-weight error is caught
    assert bin(REPORT_CRC_POLY).count("1") % 2 == 0
    data = np.zeros(HOURLY_REPORT_BITS, dtype=np.uint8)
    data[[0, 17, 5000]] = 1
    assert code.compute(data).any()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_hourly_segment_reassemble_roundtrip(seed):
    bits = np.random.default_rng(seed).integers(0, 2, HOURLY_REPORT_BITS, dtype=np.uint8)
    blocks = segment_report(bits, B, G, "hourly")
    assert blocks.shape == (21, 32, 16)
    assert np.array_equal(reassemble_report(blocks, B, G, HOURLY_REPORT_BITS, "hourly"), bits)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_emergency_segment_reassemble_roundtrip(seed):
    bits = np.random.default_rng(seed).integers(0, 2, EMERGENCY_REPORT_BITS, dtype=np.uint8)
    blocks = segment_report(bits, B, G, "emergency")
    assert blocks.shape == (1, 32, 16)
    flat = blocks.reshape(-1)
    assert not flat[510:].any()
    assert np.array_equal(reassemble_report(blocks, B, G, EMERGENCY_REPORT_BITS, "emergency"), bits)


def test_block_corruption_names_the_block():
    bits = np.random.default_rng(3).integers(0, 2, HOURLY_REPORT_BITS, dtype=np.uint8)
    blocks = segment_report(bits, B, G, "hourly")
    blocks[7, 3, 2] ^= 1
    with pytest.raises(BlockCheckError) as exc:
        reassemble_report(blocks, B, G, HOURLY_REPORT_BITS, "hourly")
    assert exc.value.index == 7


def test_report_check_catches_what_blocks_miss():
    bits = np.random.default_rng(4).integers(0, 2, HOURLY_REPORT_BITS, dtype=np.uint8)
    blocks = segment_report(bits, B, G, "hourly").reshape(21, 512)
    code = block_code(B)
    cols = np.concatenate([code.columns, 1 << np.arange(9, -1, -1)]).tolist()
    # a weight-4 pattern invisible to the block check, placed in report bits of block 2
    quad = next(q for q in itertools.combinations(range(502), 4)
                if cols[q[0]] ^ cols[q[1]] ^ cols[q[2]] ^ cols[q[3]] == 0)
    blocks[2, list(quad)] ^= 1
    assert code.passes(blocks).all()
    with pytest.raises(ReportCheckError):
        reassemble_report(blocks.reshape(21, 32, 16), B, G, HOURLY_REPORT_BITS, "hourly")


def test_int_bits_roundtrip():
    for v in (0, 1, 0x8000, 0xFFFF, 12345):
        assert bits_to_int(int_to_bits(v, 16)) == v
    with pytest.raises(CodecError):
        int_to_bits(1 << 16, 16)
