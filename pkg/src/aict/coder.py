"""Reference range coder over quantized CDF tables.

The byte-level behavior of this module is normative: the accelerated coder
must reproduce it bit-exactly.  See BITSTREAM.md for the coding conventions
(state width, renormalization, termination, and the overflow escape).
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CorruptStreamError",
    "QuantizedCdf",
    "build_cdf",
    "gaussian_cdf_table",
    "range_encode",
    "range_decode",
    "RangeEncoder",
    "RangeDecoder",
]

_STATE_BITS = 32
_FULL = 1 << _STATE_BITS
_HALF = _FULL >> 1
_QUARTER = _FULL >> 2
_MASK = _FULL - 1
# Virtual zero bytes a decoder may read past the end of its substream; the
# initial 32-bit fill legitimately needs up to 4 on short streams.
_EOF_SLACK_BYTES = 4


class CorruptStreamError(ValueError):
    """Raised when a substream cannot be decoded; carries the byte offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (byte offset {position})")
        self.position = position


@dataclass(frozen=True)
class QuantizedCdf:
    """Integer CDF for one coding context.

    ``cum`` has ``n_symbols + 1`` strictly increasing entries from 0 to
    ``2**precision_bits``; the final symbol slot is the overflow escape.
    ``offset`` is the integer value coded by regular symbol 0.
    """

    cum: tuple[int, ...]
    offset: int
    precision_bits: int = 16

    def __post_init__(self):
        total = 1 << self.precision_bits
        if len(self.cum) < 3:
            raise ValueError("a CDF needs at least one regular symbol plus overflow")
        if self.cum[0] != 0 or self.cum[-1] != total:
            raise ValueError(f"cumulative counts must run from 0 to {total}")
        if any(b <= a for a, b in zip(self.cum, self.cum[1:])):
            raise ValueError("every symbol needs a nonzero count")

    @property
    def n_regular(self) -> int:
        return len(self.cum) - 2

    @property
    def max_value(self) -> int:
        return self.offset + self.n_regular - 1


def build_cdf(masses, precision_bits: int = 16) -> tuple[int, ...]:
    """Renormalize probability masses to integer cumulative counts.

    Counts are proportional to the masses, total exactly ``2**precision_bits``
    and give every symbol at least one count.  Deterministic: remainders are
    distributed largest-first with index order breaking ties.
    """
    masses = np.asarray(masses, dtype=np.float64)
    n = masses.shape[0]
    total = 1 << precision_bits
    if n == 0:
        raise ValueError("empty mass vector")
    if n > total:
        raise ValueError(f"cannot give {n} symbols nonzero counts at precision {precision_bits}")
    masses = np.maximum(masses, 0.0)
    mass_sum = masses.sum()
    if mass_sum <= 0:
        masses = np.ones(n)
        mass_sum = float(n)
    raw = masses * (total / mass_sum)
    counts = np.maximum(1, np.floor(raw).astype(np.int64))
    deficit = total - int(counts.sum())
    if deficit > 0:
        remainders = raw - np.floor(raw)
        # stable sort: descending remainder, ascending index on ties
        order = np.lexsort((np.arange(n), -remainders))
        counts[order[:deficit]] += 1
    elif deficit < 0:
        order = np.lexsort((np.arange(n), -counts))
        pos = 0
        while deficit < 0:
            i = order[pos % n]
            if counts[i] > 1:
                counts[i] -= 1
                deficit += 1
            pos += 1
    cum = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=cum[1:])
    return tuple(int(c) for c in cum)


def gaussian_cdf_table(sigma: float, precision_bits: int = 16,
                       tail_mass: float = 2.0 ** -16) -> QuantizedCdf:
    """Pre-baked table for a zero-mean Gaussian of the given scale.

    The regular symbol range covers +/- the point where each residual tail
    drops below ``tail_mass``; anything outside is coded via the overflow
    escape.
    """
    from math import ceil, erf, sqrt

    def cdf(x: float) -> float:
        return 0.5 * (1.0 + erf(x / (sigma * sqrt(2.0))))

    tail = 1
    while cdf(-tail + 0.5) >= tail_mass and tail < (1 << 24):
        tail = ceil(tail * 1.5) + 1
    grid = np.arange(-tail, tail + 1, dtype=np.float64)
    masses = np.array([cdf(v + 0.5) - cdf(v - 0.5) for v in grid])
    overflow = max(2.0 * cdf(-tail - 0.5), 1e-12)
    cum = build_cdf(np.concatenate([masses, [overflow]]), precision_bits)
    return QuantizedCdf(cum=cum, offset=-tail, precision_bits=precision_bits)


class _BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._nbits += 1
        if self._nbits == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def getvalue(self) -> bytes:
        if self._nbits:
            self._bytes.append(self._acc << (8 - self._nbits))
            self._acc = 0
            self._nbits = 0
        return bytes(self._bytes)


class _BitReader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._acc = 0
        self._nbits = 0
        self._virtual = 0

    def read(self) -> int:
        if self._nbits == 0:
            if self._pos < len(self._data):
                self._acc = self._data[self._pos]
                self._pos += 1
            else:
                self._virtual += 1
                if self._virtual > _EOF_SLACK_BYTES:
                    raise CorruptStreamError("substream truncated", len(self._data))
                self._acc = 0
            self._nbits = 8
        self._nbits -= 1
        return (self._acc >> self._nbits) & 1


class RangeEncoder:
    """Binary range encoder with 32-bit state (carry-less, underflow-counted)."""

    def __init__(self):
        self._low = 0
        self._high = _MASK
        self._underflow = 0
        self._out = _BitWriter()

    def _emit(self, bit: int) -> None:
        self._out.write(bit)
        inv = bit ^ 1
        for _ in range(self._underflow):
            self._out.write(inv)
        self._underflow = 0

    def encode(self, cum_low: int, cum_high: int, total: int) -> None:
        span = self._high - self._low + 1
        self._high = self._low + (cum_high * span) // total - 1
        self._low = self._low + (cum_low * span) // total
        while ((self._low ^ self._high) & _HALF) == 0:
            self._emit(self._low >> (_STATE_BITS - 1))
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
        while self._low & ~self._high & _QUARTER:
            self._underflow += 1
            self._low = (self._low << 1) ^ _HALF
            self._high = ((self._high ^ _HALF) << 1) | _HALF | 1

    def encode_bit(self, bit: int) -> None:
        half = 1 << 15
        self.encode(bit * half, (bit + 1) * half, 1 << 16)

    def finish(self) -> bytes:
        self._emit(1)
        return self._out.getvalue()


class RangeDecoder:
    def __init__(self, data: bytes):
        self._in = _BitReader(data)
        self._low = 0
        self._high = _MASK
        self._code = 0
        for _ in range(_STATE_BITS):
            self._code = (self._code << 1) | self._in.read()

    def decode(self, cum: list[int], total: int) -> int:
        span = self._high - self._low + 1
        offset = self._code - self._low
        value = ((offset + 1) * total - 1) // span
        symbol = bisect_right(cum, value) - 1
        self._high = self._low + (cum[symbol + 1] * span) // total - 1
        self._low = self._low + (cum[symbol] * span) // total
        while ((self._low ^ self._high) & _HALF) == 0:
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
            self._code = ((self._code << 1) & _MASK) | self._in.read()
        while self._low & ~self._high & _QUARTER:
            self._low = (self._low << 1) ^ _HALF
            self._high = ((self._high ^ _HALF) << 1) | _HALF | 1
            self._code = (self._code & _HALF) | ((self._code << 1) & (_MASK >> 1)) | self._in.read()
        return symbol

    def decode_bit(self) -> int:
        return self.decode([0, 1 << 15, 1 << 16], 1 << 16)


def _encode_exp_golomb(enc: RangeEncoder, u: int) -> None:
    m = u + 1
    n = m.bit_length()
    for _ in range(n - 1):
        enc.encode_bit(0)
    for i in range(n - 1, -1, -1):
        enc.encode_bit((m >> i) & 1)


def _decode_exp_golomb(dec: RangeDecoder) -> int:
    n = 0
    while dec.decode_bit() == 0:
        n += 1
        if n > 64:
            raise CorruptStreamError("runaway overflow escape", 0)
    m = 1
    for _ in range(n):
        m = (m << 1) | dec.decode_bit()
    return m - 1


def range_encode(values, indexes, tables: list[QuantizedCdf]) -> bytes:
    """Encode integer ``values``, each coded with ``tables[indexes[i]]``.

    Out-of-range values use the table's overflow slot followed by a sign bit
    and an Exp-Golomb coded excess.
    """
    if len(values) != len(indexes):
        raise ValueError("values and indexes must have equal length")
    enc = RangeEncoder()
    cums = [list(t.cum) for t in tables]
    for v, ti in zip(values, indexes):
        table = tables[ti]
        cum = cums[ti]
        total = cum[-1]
        k = int(v) - table.offset
        if 0 <= k < table.n_regular:
            enc.encode(cum[k], cum[k + 1], total)
        else:
            over = table.n_regular
            enc.encode(cum[over], cum[over + 1], total)
            if k >= table.n_regular:
                enc.encode_bit(0)
                _encode_exp_golomb(enc, k - table.n_regular)
            else:
                enc.encode_bit(1)
                _encode_exp_golomb(enc, -k - 1)
    return enc.finish()


def range_decode(data: bytes, indexes, tables: list[QuantizedCdf]) -> list[int]:
    """Decode ``len(indexes)`` integer values; inverse of :func:`range_encode`."""
    dec = RangeDecoder(data)
    cums = [list(t.cum) for t in tables]
    out = []
    for ti in indexes:
        table = tables[ti]
        cum = cums[ti]
        k = dec.decode(cum, cum[-1])
        if k == table.n_regular:
            if dec.decode_bit() == 0:
                k = table.n_regular + _decode_exp_golomb(dec)
            else:
                k = -1 - _decode_exp_golomb(dec)
        out.append(k + table.offset)
    return out
