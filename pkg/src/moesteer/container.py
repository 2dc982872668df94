"""Checkpoint container: magic, JSON header, then little-endian float64 blocks.

Layout::

    magic (8 bytes) | header length (u32 LE) | header JSON (utf-8) | blocks...

The header lists blocks as ``{"name", "shape"}`` in write order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1
_LEN = struct.Struct("<I")


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_container(magic: bytes, header: dict, blocks: list[tuple[str, np.ndarray]]) -> bytes:
    assert len(magic) == 8
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["blocks"] = [{"name": n, "shape": list(np.shape(a))} for n, a in blocks]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [magic, _LEN.pack(len(head)), head]
    for _, arr in blocks:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def write_container(path, magic: bytes, header: dict, blocks: list[tuple[str, np.ndarray]]) -> None:
    atomic_write_bytes(path, encode_container(magic, header, blocks))


def decode_container(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != magic:
        raise FormatError(f"bad magic {data[:8]!r}, expected {magic!r}", offset=0)
    if len(data) < 12:
        raise FormatError("truncated header length", offset=8)
    (hlen,) = _LEN.unpack_from(data, 8)
    start = 12
    if start + hlen > len(data):
        raise FormatError(f"header of {hlen} bytes runs past end of file", offset=start)
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", offset=start) from None
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object", offset=start)
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported format version {header.get('format_version')!r}", offset=start
        )
    pos = start + hlen
    blocks: dict[str, np.ndarray] = {}
    for spec in header.get("blocks", []):
        shape = tuple(int(n) for n in spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"block {spec['name']!r} truncated", offset=pos)
        arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos)
        blocks[spec["name"]] = arr.astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last block", offset=pos)
    return header, blocks


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes(), magic)
