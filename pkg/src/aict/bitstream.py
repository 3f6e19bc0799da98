"""Bitstream container: fixed header plus length-prefixed substreams.

Layout is normative and documented with hex examples in BITSTREAM.md.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from .coder import CorruptStreamError

__all__ = [
    "MAGIC",
    "VERSION",
    "UnsupportedStreamError",
    "BitstreamHeader",
    "pack_bitstream",
    "parse_bitstream",
    "s_to_u16",
    "u16_to_s",
]

MAGIC = b"AICT"
VERSION = 1

_FIXED = struct.Struct("<4sBBBBIIH")  # magic, version, flags, quality, reserved, W, H, s


class UnsupportedStreamError(ValueError):
    """Raised for wrong magic bytes or an unsupported container version."""


def s_to_u16(s: float) -> int:
    """Quantize a resize factor in [0, 1] to the u16 header grid.

    Ties round down: quantizing s upward can push a ceil-to-64 target size
    across a whole block, while downward error is invisible.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"resize factor {s} outside [0, 1]")
    return int(math.ceil(s * 65535.0 - 0.5))


def u16_to_s(value: int) -> float:
    return value / 65535.0


@dataclass(frozen=True)
class BitstreamHeader:
    original_width: int
    original_height: int
    scale_used: bool = False
    resize_s_u16: int = 65535
    quality_index: int = 0
    version: int = VERSION

    def __post_init__(self):
        if not (0 < self.original_width < 1 << 32 and 0 < self.original_height < 1 << 32):
            raise ValueError("image extents must be positive u32 values")
        if not 0 <= self.resize_s_u16 <= 65535:
            raise ValueError("resize_s_u16 out of range")
        if not self.scale_used and self.resize_s_u16 != 65535:
            raise ValueError("resize_s must be 65535 when the scale flag is unset")
        if not 0 <= self.quality_index <= 255:
            raise ValueError("quality_index must fit a u8")

    @property
    def resize_s(self) -> float:
        return u16_to_s(self.resize_s_u16)


def pack_bitstream(header: BitstreamHeader, substreams: list[bytes]) -> bytes:
    if len(substreams) > 255:
        raise ValueError("at most 255 substreams are supported")
    flags = 0x01 if header.scale_used else 0x00
    out = bytearray(
        _FIXED.pack(
            MAGIC,
            header.version,
            flags,
            header.quality_index,
            0,
            header.original_width,
            header.original_height,
            header.resize_s_u16,
        )
    )
    out.append(len(substreams))
    for sub in substreams:
        out += struct.pack("<I", len(sub))
    for sub in substreams:
        out += sub
    return bytes(out)


def parse_bitstream(data: bytes) -> tuple[BitstreamHeader, list[bytes]]:
    if len(data) < _FIXED.size + 1:
        raise CorruptStreamError("container shorter than the fixed header", len(data))
    magic, version, flags, quality, _reserved, width, height, s_u16 = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise UnsupportedStreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedStreamError(f"unsupported container version {version}")
    count = data[_FIXED.size]
    pos = _FIXED.size + 1
    if len(data) < pos + 4 * count:
        raise CorruptStreamError("substream table truncated", len(data))
    lengths = struct.unpack_from(f"<{count}I", data, pos) if count else ()
    pos += 4 * count
    if pos + sum(lengths) != len(data):
        raise CorruptStreamError(
            f"payload size mismatch: header declares {sum(lengths)} bytes, "
            f"found {len(data) - pos}",
            pos,
        )
    substreams = []
    for length in lengths:
        substreams.append(data[pos : pos + length])
        pos += length
    scale_used = bool(flags & 0x01)
    header = BitstreamHeader(
        original_width=width,
        original_height=height,
        scale_used=scale_used,
        resize_s_u16=s_u16 if scale_used else 65535,
        quality_index=quality,
        version=version,
    )
    if not scale_used and s_u16 != 65535:
        raise CorruptStreamError("resize_s set while scale flag is clear", 14)
    return header, substreams
