"""Binary tensor records and the length-prefixed archive that bundles them.

Tensor record::

    b"AVSF" | version u8 | rank u8 | extents u64 LE * rank | values f64 LE

Archive::

    b"AVSA" | version u8 | count u32 LE | entries

each entry being ``name_len u16 | name utf-8 | payload_len u64 | payload``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

TENSOR_MAGIC = b"AVSF"
ARCHIVE_MAGIC = b"AVSA"
VERSION = 1


class FormatError(ValueError):
    pass


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim > 255:
        raise FormatError("rank above 255 cannot be encoded")
    head = TENSOR_MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 6 or buf[:4] != TENSOR_MAGIC:
        raise FormatError("not a tensor record (bad magic)")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor record version {version}")
    offset = 6 + 8 * rank
    if len(buf) < offset:
        raise FormatError("truncated tensor record header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != offset + 8 * count:
        raise FormatError(f"tensor record holds {len(buf) - offset} value bytes, expected {8 * count}")
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return Tensor(values.reshape(shape))


def pack_archive(entries: Mapping[str, bytes]) -> bytes:
    out = io.BytesIO()
    out.write(ARCHIVE_MAGIC + struct.pack("<BI", VERSION, len(entries)))
    for name, payload in entries.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def unpack_archive(buf: bytes) -> dict[str, bytes]:
    if len(buf) < 9 or buf[:4] != ARCHIVE_MAGIC:
        raise FormatError("not an archive (bad magic)")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported archive version {version}")
    pos, entries = 9, {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise FormatError("truncated archive")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if pos + 8 > len(buf):
            raise FormatError("truncated archive")
        (plen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        if pos + plen > len(buf):
            raise FormatError(f"truncated archive entry {name!r}")
        entries[name] = buf[pos:pos + plen]
        pos += plen
    if pos != len(buf):
        raise FormatError("trailing bytes after archive")
    return entries


def save_tensors(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    Path(path).write_bytes(pack_archive({k: tensor_to_bytes(v) for k, v in tensors.items()}))


def load_tensors(path: str | Path) -> dict[str, Tensor]:
    return {k: tensor_from_bytes(v) for k, v in unpack_archive(Path(path).read_bytes()).items()}
