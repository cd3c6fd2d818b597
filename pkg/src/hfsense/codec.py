"""Bit-exact packets, half-packets, blocks and reports.

Bits are carried as ``numpy.uint8`` arrays holding 0/1, most significant bit
first.  Packet layout is ``[address][payload][check]``.

Error detection uses systematic linear check codes.  The packet and block
checks are built from distinct odd-weight parity-check columns (a shortened
extended Hamming code): every odd-weight error pattern and every pattern of
fewer than four flips is detected.  No polynomial CRC of 6 bits reaches that
guarantee on a 32-bit codeword (nor 10 bits on 512), see
``tests/test_codec.py::test_no_polynomial_crc_reaches_hd4``.  The whole-report
check is an ordinary polynomial CRC, where lengths allow it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "CodecError",
    "SizingError",
    "BlockCheckError",
    "ReportCheckError",
    "PacketGeometry",
    "BlockGeometry",
    "PacketKind",
    "Packet",
    "DecodedPacket",
    "CheckCode",
    "ceil_log2",
    "check_length",
    "sizing",
    "half_geometry",
    "block_sizing",
    "packet_code",
    "block_code",
    "report_code",
    "int_to_bits",
    "bits_to_int",
    "build_packet",
    "build_packets",
    "parse_packet",
    "parse_packets",
    "build_half_packet",
    "segment_report",
    "reassemble_report",
    "required_packets",
    "final_block_fill",
    "HOURLY_REPORT_BITS",
    "EMERGENCY_REPORT_BITS",
    "REPORT_CRC_POLY",
]

HOURLY_REPORT_BITS = 10240
EMERGENCY_REPORT_BITS = 500

# (x + 1)(x^14 + x^5 + x^3 + x + 1), primitive factor: order 16383 > 10240 + 15
REPORT_CRC_POLY = 0xC07D


class CodecError(ValueError):
    """Malformed input to a codec operation (wrong length, out-of-range field)."""


class SizingError(CodecError):
    pass


class BlockCheckError(CodecError):
    """A block failed its check; ``index`` names the block to retransmit."""

    def __init__(self, index: int):
        super().__init__(f"block {index} failed its check")
        self.index = index


class ReportCheckError(CodecError):
    """All blocks passed but the whole-report check did not: resend everything."""


def ceil_log2(n: int) -> int:
    if n < 1:
        raise SizingError(f"ceil_log2 undefined for {n}")
    return (n - 1).bit_length()


def check_length(length: int) -> int:
    """Check bits needed to catch every odd-weight and every <4-flip error: ceil(log2(L) + 1)."""
    return ceil_log2(length) + 1


@dataclass(frozen=True)
class PacketGeometry:
    packet_len: int
    address_bits: int
    crc_bits: int
    payload_bits: int

    @property
    def data_bits(self) -> int:
        return self.address_bits + self.payload_bits


@dataclass(frozen=True)
class BlockGeometry:
    block_len: int
    crc_bits: int
    info_bits: int
    packets_per_block: int


def sizing(network_size: int, packet_len: int) -> PacketGeometry:
    if network_size < 2:
        raise SizingError(f"network_size must be >= 2, got {network_size}")
    a = ceil_log2(network_size)
    c = check_length(packet_len)
    if packet_len < a + c:
        raise SizingError(f"{packet_len}-bit packet cannot hold {a} address + {c} check bits")
    return PacketGeometry(packet_len, a, c, packet_len - a - c)


def half_geometry(full: PacketGeometry) -> PacketGeometry:
    """Address-only packet keeping the full packet's check length (16 bits by default)."""
    return PacketGeometry(full.address_bits + full.crc_bits, full.address_bits, full.crc_bits, 0)


def block_sizing(block_len: int, packet: PacketGeometry) -> BlockGeometry:
    c = check_length(block_len)
    if block_len <= c:
        raise SizingError(f"{block_len}-bit block has no room beyond its {c}-bit check")
    # a block that is not a whole number of payloads rounds its packet count up
    ppb = -(-block_len // packet.payload_bits) if packet.payload_bits else 0
    return BlockGeometry(block_len, c, block_len - c, ppb)


class PacketKind(enum.Enum):
    DATA = "data"
    HALF = "half"
    ACK_NAK = "ack_nak"
    CONTROL = "control"
    RATE_INDICATOR = "rate_indicator"


class CheckCode:
    """Systematic binary linear check: ``check = data @ M (mod 2)``.

    ``columns[i]`` is the r-bit syndrome contribution of data bit ``i``
    (MSB-first).  Check bits contribute unit vectors.
    """

    def __init__(self, columns, r: int, name: str = "", shorten_from_front: bool = False):
        cols = np.asarray(columns, dtype=np.int64)
        self.r = r
        self.shorten_from_front = shorten_from_front
        self.n_data = len(cols)
        self.name = name
        self.columns = cols
        shifts = np.arange(r - 1, -1, -1)
        self.matrix = ((cols[:, None] >> shifts) & 1).astype(np.float32)
        unit = np.eye(r, dtype=np.float32)
        self.parity = np.vstack([self.matrix, unit])
        self._col_list = [int(c) for c in cols]
        self._shortened = {}

    @classmethod
    def odd_weight(cls, r: int, n_data: int) -> "CheckCode":
        """First ``n_data`` odd-weight, non-unit r-bit columns in increasing order."""
        cols = [v for v in range(1, 1 << r) if bin(v).count("1") % 2 == 1 and v & (v - 1)]
        if n_data > len(cols):
            raise SizingError(f"{r}-bit odd-weight check covers at most {len(cols)} data bits")
        return cls(cols[:n_data], r, name=f"oddweight-{r}")

    @classmethod
    def polynomial(cls, poly: int, r: int, n_data: int) -> "CheckCode":
        """Zero-init, no-final-XOR CRC with generator ``poly`` (``x^r`` term included)."""
        if poly >> r != 1:
            raise SizingError(f"generator 0x{poly:x} is not of degree {r}")
        # data bit i (MSB first) contributes x^(n_data - 1 - i + r) mod poly
        rem = []
        v = _polymod(1 << r, poly, r)
        for _ in range(n_data):
            rem.append(v)
            v <<= 1
            if v >> r:
                v ^= poly
        return cls(rem[::-1], r, name=f"crc-{r}/0x{poly:x}", shorten_from_front=True)

    def shortened(self, n_data: int) -> "CheckCode":
        cached = self._shortened.get(n_data)
        if cached is not None:
            return cached
        if n_data > self.n_data:
            raise SizingError(f"cannot shorten {self.n_data}-bit code to {n_data}")
        # a CRC ignores leading zeros, so it shortens by dropping its first columns
        cols = self.columns[self.n_data - n_data:] if self.shorten_from_front else self.columns[:n_data]
        code = CheckCode(cols, self.r, self.name, self.shorten_from_front)
        self._shortened[n_data] = code
        return code

    def compute(self, data) -> np.ndarray:
        """Check bits for ``data`` (shape ``(..., n_data)``)."""
        d = np.asarray(data)
        if d.shape[-1] != self.n_data:
            raise CodecError(f"expected {self.n_data} data bits, got {d.shape[-1]}")
        out = d.astype(np.float32) @ self.matrix
        return (out.astype(np.int64) & 1).astype(np.uint8)

    def compute_int(self, data) -> int:
        s = 0
        for i, b in enumerate(np.asarray(data)):
            if b:
                s ^= self._col_list[i]
        return s

    def syndrome(self, codewords) -> np.ndarray:
        """Integer syndrome per codeword; zero means the check passes."""
        w = np.asarray(codewords)
        if w.shape[-1] != self.n_data + self.r:
            raise CodecError(f"expected {self.n_data + self.r}-bit codewords, got {w.shape[-1]}")
        s = (w.astype(np.float32) @ self.parity).astype(np.int64) & 1
        weights = 1 << np.arange(self.r - 1, -1, -1)
        return s @ weights

    def passes(self, codewords) -> np.ndarray:
        return self.syndrome(codewords) == 0

    def __repr__(self):
        return f"CheckCode({self.name}, r={self.r}, n_data={self.n_data})"


def _polymod(v: int, g: int, r: int) -> int:
    while v.bit_length() > r:
        v ^= g << (v.bit_length() - 1 - r)
    return v


@lru_cache(maxsize=None)
def packet_code(geometry: PacketGeometry) -> CheckCode:
    return CheckCode.odd_weight(geometry.crc_bits, geometry.data_bits)


@lru_cache(maxsize=None)
def block_code(block: BlockGeometry) -> CheckCode:
    return CheckCode.odd_weight(block.crc_bits, block.info_bits)


@lru_cache(maxsize=None)
def report_code(report_bits: int = HOURLY_REPORT_BITS) -> CheckCode:
    r = check_length(report_bits)
    if r == 15:
        return CheckCode.polynomial(REPORT_CRC_POLY, 15, report_bits)
    return CheckCode.odd_weight(r, report_bits)


def int_to_bits(value: int, width: int) -> np.ndarray:
    if value < 0 or value >> width:
        raise CodecError(f"{value} does not fit in {width} bits")
    return ((value >> np.arange(width - 1, -1, -1)) & 1).astype(np.uint8)


def bits_to_int(bits) -> int:
    out = 0
    for b in np.asarray(bits).tolist():
        out = (out << 1) | int(b)
    return out


def _address_bits(addresses, width: int) -> np.ndarray:
    a = np.asarray(addresses, dtype=np.int64)
    return ((a[..., None] >> np.arange(width - 1, -1, -1)) & 1).astype(np.uint8)


@dataclass(frozen=True)
class DecodedPacket:
    address: int
    payload: np.ndarray

    def payload_int(self) -> int:
        return bits_to_int(self.payload)


@dataclass(frozen=True)
class Packet:
    kind: PacketKind
    address: int
    payload: np.ndarray
    crc: int

    def to_bits(self, geometry: PacketGeometry) -> np.ndarray:
        return build_packet(geometry, self.address, self.payload)


def build_packet(geometry: PacketGeometry, address: int, payload_bits) -> np.ndarray:
    """Serialize one packet; ``parse_packet`` inverts it exactly."""
    payload = np.asarray(payload_bits, dtype=np.uint8).reshape(-1)
    if payload.size != geometry.payload_bits:
        raise CodecError(f"payload must be {geometry.payload_bits} bits, got {payload.size}")
    if not 0 <= address < (1 << geometry.address_bits):
        raise CodecError(f"address {address} out of range for {geometry.address_bits} bits")
    data = np.concatenate([int_to_bits(address, geometry.address_bits), payload])
    return np.concatenate([data, packet_code(geometry).compute(data)])


def build_half_packet(geometry: PacketGeometry, address: int) -> np.ndarray:
    return build_packet(half_geometry(geometry), address, np.zeros(0, dtype=np.uint8))


def build_packets(geometry: PacketGeometry, addresses, payloads) -> np.ndarray:
    """Vectorized ``build_packet``: returns ``(n, packet_len)``."""
    addr = np.asarray(addresses, dtype=np.int64).reshape(-1)
    if np.any(addr < 0) or np.any(addr >> geometry.address_bits):
        raise CodecError("address out of range")
    pay = np.asarray(payloads, dtype=np.uint8).reshape(len(addr), geometry.payload_bits)
    data = np.concatenate([_address_bits(addr, geometry.address_bits), pay], axis=1)
    return np.concatenate([data, packet_code(geometry).compute(data)], axis=1)


def parse_packet(bits, geometry: PacketGeometry) -> DecodedPacket | None:
    """Return the decoded fields, or ``None`` when the check fails.

    A failed check is an ordinary outcome (the MAC NAKs it); a wrong bit
    length is a :class:`CodecError`.
    """
    w = np.asarray(bits, dtype=np.uint8).reshape(-1)
    half = half_geometry(geometry)
    if w.size == geometry.packet_len:
        geo = geometry
    elif w.size == half.packet_len:
        geo = half
    else:
        raise CodecError(f"expected a {geometry.packet_len}- or {half.packet_len}-bit word, got {w.size}")
    code = packet_code(geo)
    data = w[: geo.data_bits]
    if code.compute_int(data) != bits_to_int(w[geo.data_bits:]):
        return None
    return DecodedPacket(bits_to_int(data[: geo.address_bits]), data[geo.address_bits:].copy())


def parse_packets(words, geometry: PacketGeometry):
    """Vectorized parse of ``(n, L)`` words: ``(ok, addresses, payloads)``."""
    w = np.asarray(words, dtype=np.uint8)
    if w.ndim != 2 or w.shape[1] != geometry.packet_len:
        raise CodecError(f"expected (n, {geometry.packet_len}) words, got {w.shape}")
    ok = packet_code(geometry).passes(w)
    weights = 1 << np.arange(geometry.address_bits - 1, -1, -1)
    addresses = w[:, : geometry.address_bits].astype(np.int64) @ weights
    payloads = w[:, geometry.address_bits: geometry.data_bits]
    return ok, addresses, payloads


def required_packets(report_bits: int, block: BlockGeometry, packet: PacketGeometry,
                     kind: str | None = None) -> int:
    """Packets that must arrive intact to deliver a report of ``report_bits``."""
    kind = kind or _infer_kind(report_bits)
    if kind == "emergency":
        return -(-(report_bits + block.crc_bits) // packet.payload_bits)
    n_blocks = -(-(report_bits + check_length(report_bits)) // block.info_bits)
    return n_blocks * block.packets_per_block


def final_block_fill(report_bits: int = HOURLY_REPORT_BITS, block: BlockGeometry | None = None):
    """Occupancy of the last block: report bits alone, and report bits plus the final check."""
    block = block or block_sizing(512, sizing(1000, 32))
    crc = check_length(report_bits)
    n_blocks = -(-(report_bits + crc) // block.info_bits)
    tail = report_bits - (n_blocks - 1) * block.info_bits
    return {
        "blocks": n_blocks,
        "report_bits_in_final_block": tail,
        "report_fraction": tail / block.info_bits,
        "with_report_crc_fraction": (tail + crc) / block.info_bits,
    }


def _infer_kind(report_bits: int) -> str:
    return "emergency" if report_bits == EMERGENCY_REPORT_BITS else "hourly"


def segment_report(report_bits, block: BlockGeometry, packet: PacketGeometry,
                   kind: str | None = None) -> np.ndarray:
    """Split a report into packet payloads grouped by block.

    Returns an array of shape ``(n_blocks, packets_per_block, payload_bits)``.
    Hourly reports get a whole-report CRC appended, are cut into
    ``info_bits`` chunks (the last zero-padded) and each chunk gets its own
    block check.  Emergency reports are ``[report][block check][zero pad]``.
    """
    bits = np.asarray(report_bits, dtype=np.uint8).reshape(-1)
    kind = kind or _infer_kind(bits.size)
    ipp = packet.payload_bits
    if block.block_len % ipp:
        raise SizingError(f"{block.block_len}-bit block is not a whole number of {ipp}-bit payloads")
    code = block_code(block)
    if kind == "emergency":
        if bits.size + block.crc_bits > block.block_len:
            raise CodecError(f"emergency report of {bits.size} bits does not fit one block")
        crc = code.shortened(bits.size).compute(bits)
        framed = np.zeros(block.block_len, dtype=np.uint8)
        framed[: bits.size] = bits
        framed[bits.size: bits.size + block.crc_bits] = crc
        return framed.reshape(1, block.block_len // ipp, ipp)
    if kind != "hourly":
        raise CodecError(f"unknown report kind {kind!r}")
    if bits.size == 0:
        raise CodecError("empty report")
    stream = np.concatenate([bits, report_code(bits.size).compute(bits)])
    n_blocks = -(-stream.size // block.info_bits)
    info = np.zeros(n_blocks * block.info_bits, dtype=np.uint8)
    info[: stream.size] = stream
    info = info.reshape(n_blocks, block.info_bits)
    blocks = np.concatenate([info, code.compute(info)], axis=1)
    return blocks.reshape(n_blocks, block.block_len // ipp, ipp)


def check_block(block_payloads, block: BlockGeometry) -> bool:
    flat = np.asarray(block_payloads, dtype=np.uint8).reshape(-1)[: block.block_len]
    return bool(block_code(block).passes(flat[None, :])[0])


def reassemble_report(blocks, block: BlockGeometry, packet: PacketGeometry,
                      report_len: int, kind: str | None = None) -> np.ndarray:
    """Inverse of :func:`segment_report`.

    Raises :class:`BlockCheckError` naming the first failing block, or
    :class:`ReportCheckError` when only the whole-report check fails.
    """
    arr = np.asarray(blocks, dtype=np.uint8)
    kind = kind or _infer_kind(report_len)
    flat_blocks = arr.reshape(arr.shape[0], -1)
    if flat_blocks.shape[1] != block.block_len:
        raise CodecError(f"blocks must be {block.block_len} bits, got {flat_blocks.shape[1]}")
    code = block_code(block)
    if kind == "emergency":
        data = flat_blocks[0, :report_len]
        crc = flat_blocks[0, report_len: report_len + block.crc_bits]
        if not np.array_equal(code.shortened(report_len).compute(data), crc):
            raise BlockCheckError(0)
        return data.copy()
    ok = code.passes(flat_blocks)
    if not ok.all():
        raise BlockCheckError(int(np.flatnonzero(~ok)[0]))
    stream = flat_blocks[:, : block.info_bits].reshape(-1)
    rcode = report_code(report_len)
    data = stream[:report_len]
    if not np.array_equal(rcode.compute(data), stream[report_len: report_len + rcode.r]):
        raise ReportCheckError("whole-report check failed")
    return data.copy()
