import pytest

from aict.bitstream import (
    MAGIC,
    BitstreamHeader,
    UnsupportedStreamError,
    pack_bitstream,
    parse_bitstream,
    s_to_u16,
    u16_to_s,
)
from aict.coder import CorruptStreamError


def test_header_roundtrip_with_scale():
    header = BitstreamHeader(
        original_width=500,
        original_height=375,
        scale_used=True,
        resize_s_u16=s_to_u16(0.75),
        quality_index=2,
    )
    subs = [b"\x01\x02", b"", b"abcdef"]
    data = pack_bitstream(header, subs)
    parsed, out_subs = parse_bitstream(data)
    assert parsed == header
    assert out_subs == subs
    assert abs(parsed.resize_s - 0.75) <= 1.0 / 65535


def test_header_without_scale_pins_s():
    header = BitstreamHeader(original_width=64, original_height=64)
    assert header.resize_s_u16 == 65535
    parsed, _ = parse_bitstream(pack_bitstream(header, []))
    assert not parsed.scale_used
    assert parsed.resize_s_u16 == 65535


def test_header_rejects_s_without_flag():
    with pytest.raises(ValueError):
        BitstreamHeader(original_width=4, original_height=4, resize_s_u16=100)


def test_s_u16_grid():
    for s in (0.0, 0.25, 0.62, 1.0):
        assert abs(u16_to_s(s_to_u16(s)) - s) <= 0.5 / 65535
    with pytest.raises(ValueError):
        s_to_u16(1.5)


def test_bad_magic_rejected():
    data = pack_bitstream(BitstreamHeader(original_width=8, original_height=8), [b"x"])
    with pytest.raises(UnsupportedStreamError, match="magic"):
        parse_bitstream(b"JUNK" + data[4:])


def test_bad_version_rejected():
    data = bytearray(pack_bitstream(BitstreamHeader(original_width=8, original_height=8), []))
    data[4] = 99
    with pytest.raises(UnsupportedStreamError, match="version"):
        parse_bitstream(bytes(data))


def test_truncated_payload_rejected():
    data = pack_bitstream(BitstreamHeader(original_width=8, original_height=8), [b"abcd"])
    with pytest.raises(CorruptStreamError, match="mismatch"):
        parse_bitstream(data[:-1])


def test_trailing_garbage_rejected():
    data = pack_bitstream(BitstreamHeader(original_width=8, original_height=8), [b"abcd"])
    with pytest.raises(CorruptStreamError):
        parse_bitstream(data + b"\x00")


def test_short_header_rejected():
    with pytest.raises(CorruptStreamError):
        parse_bitstream(MAGIC + b"\x01")


def test_file_size_accounting():
    subs = [bytes(range(10)), bytes(5)]
    data = pack_bitstream(BitstreamHeader(original_width=9, original_height=7), subs)
    header_size = 18 + 1 + 4 * len(subs)
    assert len(data) == header_size + sum(len(s) for s in subs)
