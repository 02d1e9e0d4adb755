"""
Binary weights format shared by checkpoints, feature files and the wire.

Layout (integers little-endian):

    b"FCW1"                      magic
    u32 version                  currently 1
    u32 count                    number of tensors
    count x {
        u16 name_len, name (UTF-8)
        u8 dtype                 0 = f32, 1 = f64
        u8 rank, u32 dims[rank]
        payload                  row-major little-endian values
    }
    u32 crc32                    over every byte after the magic
"""

from __future__ import annotations

import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .error_handler import (
    ArtifactIOError,
    BadMagicError,
    ChecksumError,
    ContractViolation,
    TrailingBytesError,
    TruncatedError,
    UnsupportedVersionError,
    WeightsDecodeError,
)
from .params import ParameterSet
from .tensor import DType, Tensor

MAGIC = b"FCW1"
VERSION = 1

_DTYPE_CODES = {DType.F32: 0, DType.F64: 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_LE_NUMPY = {DType.F32: np.dtype("<f4"), DType.F64: np.dtype("<f8")}


def serialize_weights(params: ParameterSet) -> bytes:
    body = bytearray(struct.pack("<II", VERSION, len(params)))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContractViolation(f"parameter name too long to encode: {name[:40]}...")
        if tensor.ndim > 0xFF:
            raise ContractViolation(f"rank {tensor.ndim} of {name} exceeds 255")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<BB", _DTYPE_CODES[tensor.dtype], tensor.ndim)
        body += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        body += tensor.data.astype(_LE_NUMPY[tensor.dtype], copy=False).tobytes(order="C")
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return MAGIC + bytes(body) + struct.pack("<I", crc)


class _Reader:
    def __init__(self, buf: bytes, offset: int, end: int) -> None:
        self.buf = buf
        self.pos = offset
        self.end = end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError(
                f"buffer ends inside {what} (need {n} bytes at offset {self.pos})",
                offset=self.pos,
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize_weights(buf: bytes) -> ParameterSet:
    """
    Decode a weights buffer.

    Checked in order: magic, version, structure (truncation, trailing
    bytes, names that are not UTF-8, empty or repeated), then the CRC32,
    so a flipped payload byte is a checksum error.
    """
    buf = bytes(buf)
    if buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    reader = _Reader(buf, len(MAGIC), len(buf))
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported weights version {version}", version=version)
    (count,) = reader.unpack("<I", "tensor count")

    entries: list[tuple[str, np.ndarray, DType]] = []
    seen: set[str] = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name_at = reader.pos
        raw_name = reader.take(name_len, "name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightsDecodeError(
                f"tensor name at offset {name_at} is not UTF-8", offset=name_at
            ) from e
        if not name or name in seen:
            raise WeightsDecodeError(f"empty or duplicate tensor name {name!r}", name=name)
        seen.add(name)
        code, rank = reader.unpack("<BB", "dtype/rank")
        if code not in _CODE_DTYPES:
            raise WeightsDecodeError(f"unknown dtype code {code}", dtype_code=code)
        dtype = _CODE_DTYPES[code]
        dims = reader.unpack(f"<{rank}I", "dims")
        # Python ints, so hostile dims cannot wrap
        n_bytes = math.prod(dims) * _LE_NUMPY[dtype].itemsize
        payload = reader.take(n_bytes, "payload")
        values = np.frombuffer(payload, dtype=_LE_NUMPY[dtype]).reshape(dims)
        entries.append((name, values, dtype))

    reader.take(4, "checksum")
    if reader.pos != len(buf):
        raise TrailingBytesError(
            f"{len(buf) - reader.pos} bytes after the checksum", extra=len(buf) - reader.pos
        )
    (stored,) = struct.unpack("<I", buf[-4:])
    actual = zlib.crc32(buf[len(MAGIC) : -4]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")

    params = ParameterSet()
    for name, values, dtype in entries:
        params.add(name, Tensor(values.astype(dtype.numpy), dtype))
    return params


def save_weights(path: Path, params: ParameterSet) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(serialize_weights(params))
    except OSError as e:
        raise ArtifactIOError(f"cannot write weights {path}: {e}", str(path)) from e


def load_weights(path: Path) -> ParameterSet:
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise ArtifactIOError(f"cannot read weights {path}: {e}", str(path)) from e
    return deserialize_weights(buf)


def describe_weights(params: ParameterSet) -> list[dict[str, object]]:
    """One row per tensor for human-readable listings."""
    rows: list[dict[str, object]] = []
    for name, tensor in params.items():
        data = tensor.data
        rows.append(
            {
                "name": name,
                "dtype": tensor.dtype.value,
                "shape": "x".join(str(d) for d in tensor.shape) or "scalar",
                "numel": tensor.size,
                "mean": float(data.mean()) if data.size else 0.0,
                "std": float(data.std()) if data.size else 0.0,
            }
        )
    return rows
