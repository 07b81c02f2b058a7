"""Binary tensor container (.mcgt): named float32 arrays in one file.

Layout, all integers little-endian:

    magic   4 bytes  b"MCGT"
    version u16      currently 1
    count   u32      number of records
    record  id_len u16 | id bytes (UTF-8) | dtype u8 (0 = float32) |
            ndim u8 | dims u32 each | payload (little-endian float32)

Used for model checkpoints, embedding exports, and gallery indexes.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputError, ShapeError

MAGIC = b"MCGT"
VERSION = 1
DTYPE_F32 = 0


def write_tensors(path, records: list[tuple[str, np.ndarray]]) -> None:
    """Write (id, array) records in order. Arrays are stored as float32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(records)))
        for rec_id, arr in records:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            id_bytes = rec_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise InputError(f"record id too long: {rec_id[:32]}...")
            f.write(struct.pack("<H", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_tensors(path) -> list[tuple[str, np.ndarray]]:
    """Read all records, preserving order. Rejects unknown magic/version."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise InputError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    pos = 10
    records = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        rec_id = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        dtype_code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        if dtype_code != DTYPE_F32:
            raise InputError(f"{path}: unknown dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        end = pos + 4 * n
        if end > len(data):
            raise ShapeError(f"{path}: truncated payload for record {rec_id!r}")
        arr = np.frombuffer(data[pos:end], dtype="<f4").reshape(dims)
        pos = end
        records.append((rec_id, arr.copy()))
    return records
