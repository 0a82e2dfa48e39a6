"""Range coding over discretized Gaussian/logistic tables and the ``.mpa`` container."""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

PRECISION = 16
TOTAL = 1 << PRECISION
SIGMA_FLOOR = 0.11
# bins are added until the two-sided tail mass falls below 2**-16
_GAUSS_Z = float(special.ndtri(1 - 2.0 ** -(PRECISION + 1)))
_LOGISTIC_Z = float(np.log(2.0 ** (PRECISION + 1) - 1))
MAX_HALF_WIDTH = 1 << 12
MAX_ESCAPE_BITS = 40

CONTAINER_MAGIC = b"MPA1"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sBHII")


class FormatError(ValueError):
    pass


class DecodeError(FormatError):
    pass


@dataclass(frozen=True)
class CdfTable:
    """Cumulative 16-bit frequencies for symbols ``smin .. smin + len(cdf) - 3`` plus an escape slot.

    ``cdf`` has one entry per symbol plus the escape, plus a leading 0;
    ``cdf[-1] == 2**16``.
    """

    smin: int
    cdf: tuple

    @property
    def smax(self):
        return self.smin + len(self.cdf) - 3

    @property
    def escape(self):
        return len(self.cdf) - 2

    def frequencies(self):
        return np.diff(np.asarray(self.cdf))


def quantize_pmf(pmf):
    """Integer frequencies summing to 2**16, each at least 1; residue goes to the most probable slot."""
    pmf = np.asarray(pmf, dtype=np.float64)
    k = pmf.size
    freq = np.floor(pmf * (TOTAL - k)).astype(np.int64) + 1
    freq[int(np.argmax(pmf))] += TOTAL - int(freq.sum())
    return freq


def _table(center, half, cdf_fn):
    edges = np.arange(center - half, center + half + 2, dtype=np.float64) - 0.5
    c = cdf_fn(edges)
    pmf = np.diff(c)
    tail = max(0.0, 1.0 - float(pmf.sum()))
    freq = quantize_pmf(np.append(pmf, tail))
    return CdfTable(int(center - half), tuple(np.concatenate([[0], np.cumsum(freq)]).tolist()))


def build_gaussian_cdf(mu, sigma):
    mu, sigma = float(mu), float(sigma)
    if not sigma >= SIGMA_FLOOR * (1 - 1e-6):
        raise ValueError(f"sigma {sigma} below floor {SIGMA_FLOOR}")
    half = min(int(np.ceil(_GAUSS_Z * sigma + 0.5)), MAX_HALF_WIDTH)
    return _table(int(np.floor(mu)), half, lambda e: special.ndtr((e - mu) / sigma))


def build_logistic_cdf(loc, scale):
    loc, scale = float(loc), float(scale)
    half = min(int(np.ceil(_LOGISTIC_Z * scale + 0.5)), MAX_HALF_WIDTH)
    return _table(int(np.floor(loc)), half, lambda e: special.expit((e - loc) / scale))


# ---------------------------------------------------------------- range coder

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class RangeEncoder:
    """Carry-propagating 32-bit range coder (single use)."""

    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum, freq):
        r = self.range >> PRECISION
        self.low += r * cum
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bit(self, bit):
        self.encode(bit << (PRECISION - 1), 1 << (PRECISION - 1))

    def encode_symbol(self, symbol, table):
        idx = symbol - table.smin
        if 0 <= idx < table.escape:
            self.encode(table.cdf[idx], table.cdf[idx + 1] - table.cdf[idx])
            return
        self.encode(table.cdf[table.escape], table.cdf[table.escape + 1] - table.cdf[table.escape])
        # side bit, then Exp-Golomb distance past the table edge
        above = idx >= table.escape
        dist = idx - table.escape if above else -idx - 1
        v = dist + 1
        n = v.bit_length()
        if n > MAX_ESCAPE_BITS:
            raise OverflowError(f"symbol {symbol} too far from table range")
        self.encode_bit(int(above))
        for _ in range(n - 1):
            self.encode_bit(0)
        for i in range(n - 1, -1, -1):
            self.encode_bit((v >> i) & 1)

    def finish(self):
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._byte()
        self.count = 0
        if self.code > _MASK32:
            self._fail("invalid stream start")

    def _fail(self, msg):
        raise DecodeError(f"{msg} (byte {self.pos}, symbol {getattr(self, 'count', 0)})")

    def _byte(self):
        if self.pos >= len(self.data):
            self._fail("stream exhausted")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_freq(self):
        self._r = self.range >> PRECISION
        v = self.code // self._r
        if v >= TOTAL:
            self._fail("corrupted stream")
        return v

    def consume(self, cum, freq):
        self.code -= self._r * cum
        self.range = self._r * freq
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._byte()) & _MASK32

    def decode_symbol(self, table):
        v = self.decode_freq()
        idx = bisect.bisect_right(table.cdf, v) - 1
        self.consume(table.cdf[idx], table.cdf[idx + 1] - table.cdf[idx])
        self.count += 1
        if idx < table.escape:
            return table.smin + idx
        above = self.decode_bit()
        n = 1
        while not self.decode_bit():
            n += 1
            if n > MAX_ESCAPE_BITS:
                self._fail("runaway escape code")
        v = 1
        for _ in range(n - 1):
            v = (v << 1) | self.decode_bit()
        dist = v - 1
        return table.smin + (table.escape + dist if above else -dist - 1)

    def decode_bit(self):
        bit = self.decode_freq() >> (PRECISION - 1)
        self.consume(bit << (PRECISION - 1), 1 << (PRECISION - 1))
        return bit

    def check_exhausted(self):
        if self.pos != len(self.data):
            self._fail(f"{len(self.data) - self.pos} unread bytes")


def range_encode(symbols, tables):
    enc = RangeEncoder()
    for s, t in zip(symbols, tables, strict=True):
        enc.encode_symbol(int(s), t)
    return enc.finish()


def range_decode(data, tables):
    dec = RangeDecoder(bytes(data))
    out = [dec.decode_symbol(t) for t in tables]
    dec.check_exhausted()
    return out


# ---------------------------------------------------------------- container

@dataclass(frozen=True)
class Container:
    q: float
    width: int
    height: int
    z_bytes: bytes
    y_bytes: bytes


HEADER_SIZE = _HEADER.size + 8


def write_container(c):
    qfix = int(round(c.q * 256))
    if not 0 <= qfix < 1 << 16:
        raise ValueError(f"quality {c.q} not representable")
    if not (0 < c.width < 1 << 32 and 0 < c.height < 1 << 32):
        raise ValueError("image dimensions out of range")
    return b"".join([
        _HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, qfix, c.width, c.height),
        struct.pack("<I", len(c.z_bytes)), c.z_bytes,
        struct.pack("<I", len(c.y_bytes)), c.y_bytes,
    ])


def read_container(data):
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, qfix, width, height = _HEADER.unpack_from(data)
    if magic != CONTAINER_MAGIC:
        raise FormatError("bad magic; not an .mpa stream")
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = _HEADER.size
    segs = []
    for name in ("z", "y"):
        if pos + 4 > len(data):
            raise FormatError(f"truncated {name}-segment length")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise FormatError(f"truncated {name}-segment ({n} bytes declared)")
        segs.append(data[pos : pos + n])
        pos += n
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes")
    return Container(qfix / 256.0, width, height, segs[0], segs[1])
