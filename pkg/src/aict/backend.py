"""Range-coder backend selection.

``AICT_ACCEL_CODER`` picks the implementation: ``off`` forces the pure
Python reference coder, ``on`` requires the accelerated shared library, and
``auto`` (the default) uses the library when it can be loaded.  Both
backends are bit-exact by contract, so the choice never affects streams.
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

from .coder import QuantizedCdf, range_decode, range_encode

__all__ = ["coder_backend", "ReferenceBackend", "AccelBackend", "accel_library_path"]

_ENV_VAR = "AICT_ACCEL_CODER"
_LIB_ENV_VAR = "AICT_ACCEL_LIB"


class ReferenceBackend:
    name = "reference"

    @staticmethod
    def encode(values, indexes, tables: list[QuantizedCdf]) -> bytes:
        return range_encode(values, indexes, tables)

    @staticmethod
    def decode(data: bytes, indexes, tables: list[QuantizedCdf]) -> list[int]:
        return range_decode(data, indexes, tables)


def accel_library_path() -> Path | None:
    env = os.environ.get(_LIB_ENV_VAR)
    if env:
        return Path(env)
    root = Path(__file__).resolve().parents[2]
    for sub in ("release", "debug"):
        cand = root / "accel" / "target" / sub / "libaict_accel.so"
        if cand.exists():
            return cand
    return None


def _pack_tables(tables: list[QuantizedCdf]) -> np.ndarray:
    """Flatten CDF tables into the directory-plus-blob layout of FFI.md."""
    parts = [np.array([len(tables)], dtype=np.uint32)]
    offset = 1 + 2 * len(tables)
    dir_entries = []
    blobs = []
    for t in tables:
        entry = np.empty(2, dtype=np.uint32)
        entry[0] = offset
        entry[1] = len(t.cum)
        dir_entries.append(entry)
        blob = np.empty(1 + len(t.cum), dtype=np.uint32)
        blob[0] = np.uint32(np.int32(t.offset).view(np.uint32) if t.offset < 0 else t.offset)
        blob[1:] = np.asarray(t.cum, dtype=np.uint32)
        blobs.append(blob)
        offset += blob.shape[0]
    return np.concatenate(parts + dir_entries + blobs)


class AccelBackend:
    name = "accel"

    def __init__(self, lib_path: Path):
        self._lib = ctypes.CDLL(str(lib_path))
        self._lib.aict_accel_encode.restype = ctypes.c_int32
        self._lib.aict_accel_encode.argtypes = [
            ctypes.POINTER(ctypes.c_int32), ctypes.POINTER(ctypes.c_uint16),
            ctypes.c_size_t,
            ctypes.POINTER(ctypes.c_uint32), ctypes.c_size_t,
            ctypes.POINTER(ctypes.c_uint8), ctypes.c_size_t,
            ctypes.POINTER(ctypes.c_size_t),
        ]
        self._lib.aict_accel_decode.restype = ctypes.c_int32
        self._lib.aict_accel_decode.argtypes = [
            ctypes.POINTER(ctypes.c_uint8), ctypes.c_size_t,
            ctypes.POINTER(ctypes.c_uint32), ctypes.c_size_t,
            ctypes.POINTER(ctypes.c_uint16), ctypes.c_size_t,
            ctypes.POINTER(ctypes.c_int32),
        ]

    def encode(self, values, indexes, tables: list[QuantizedCdf]) -> bytes:
        values = np.ascontiguousarray(values, dtype=np.int32)
        indexes = np.ascontiguousarray(indexes, dtype=np.uint16)
        blob = np.ascontiguousarray(_pack_tables(tables))
        cap = values.size * 12 + 64
        out = np.empty(cap, dtype=np.uint8)
        out_len = ctypes.c_size_t(0)
        status = self._lib.aict_accel_encode(
            values.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
            indexes.ctypes.data_as(ctypes.POINTER(ctypes.c_uint16)),
            values.size,
            blob.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            blob.size,
            out.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)),
            cap,
            ctypes.byref(out_len),
        )
        if status != 0:
            raise RuntimeError(f"accelerated encoder failed with status {status}")
        return out[: out_len.value].tobytes()

    def decode(self, data: bytes, indexes, tables: list[QuantizedCdf]) -> list[int]:
        from .coder import CorruptStreamError

        indexes = np.ascontiguousarray(indexes, dtype=np.uint16)
        blob = np.ascontiguousarray(_pack_tables(tables))
        buf = np.frombuffer(data, dtype=np.uint8) if data else np.empty(0, dtype=np.uint8)
        buf = np.ascontiguousarray(buf)
        out = np.empty(indexes.size, dtype=np.int32)
        status = self._lib.aict_accel_decode(
            buf.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)),
            buf.size,
            blob.ctypes.data_as(ctypes.POINTER(ctypes.c_uint32)),
            blob.size,
            indexes.ctypes.data_as(ctypes.POINTER(ctypes.c_uint16)),
            indexes.size,
            out.ctypes.data_as(ctypes.POINTER(ctypes.c_int32)),
        )
        if status == 4:
            raise CorruptStreamError("accelerated decoder hit a truncated substream", len(data))
        if status != 0:
            raise RuntimeError(f"accelerated decoder failed with status {status}")
        return out.tolist()


_accel_instance: AccelBackend | None = None
_accel_failed = False


def coder_backend():
    """Resolve the active backend from the environment."""
    global _accel_instance, _accel_failed
    mode = os.environ.get(_ENV_VAR, "auto").lower()
    if mode not in ("on", "off", "auto"):
        raise ValueError(f"{_ENV_VAR} must be one of on/off/auto, got {mode!r}")
    if mode == "off":
        return ReferenceBackend
    if _accel_instance is not None:
        return _accel_instance
    if not _accel_failed:
        path = accel_library_path()
        if path is not None:
            try:
                _accel_instance = AccelBackend(path)
                return _accel_instance
            except OSError:
                _accel_failed = True
        else:
            _accel_failed = True
    if mode == "on":
        raise RuntimeError(
            f"{_ENV_VAR}=on but the accelerated coder library is unavailable"
        )
    return ReferenceBackend
