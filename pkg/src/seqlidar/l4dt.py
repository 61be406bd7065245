"""Reader/writer for the ``L4DT`` binary tensor format.

Layout: magic ``b"L4DT"``, version byte 0x01, dtype byte (0 = float32,
1 = float64), ndim byte, ``ndim`` little-endian u64 extents, then row-major
little-endian scalars.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from seqlidar.errors import FormatError

MAGIC = b"L4DT"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def to_bytes(array):
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise FormatError(f"L4DT stores float32/float64 only, got {array.dtype}")
    if array.ndim > 255:
        raise FormatError("too many dimensions")
    code = _CODES[array.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def from_bytes(blob):
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise FormatError("missing L4DT magic")
    version, code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported L4DT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    offset = 7 + 8 * ndim
    if len(blob) < offset:
        raise FormatError("truncated L4DT header")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 7)
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != offset + count * dtype.itemsize:
        raise FormatError(
            f"payload has {len(blob) - offset} bytes, expected {count * dtype.itemsize}"
        )
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save(path, array):
    Path(path).write_bytes(to_bytes(array))


def load(path):
    return from_bytes(Path(path).read_bytes())
