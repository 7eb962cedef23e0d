"""Binary container shared by the dataset, model, sidecar and policy files.

Layout::

    magic      4 ASCII bytes (KFD1, KFM1, KFS1, KFP1)
    hlen       uint64 little-endian, byte length of the header
    header     UTF-8 JSON, keys sorted, compact separators
    payload    little-endian float64 values

Headers are serialized canonically so that load -> save reproduces a file
byte for byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class TrailingData(FormatError):
    pass


class HeaderError(FormatError):
    pass


def dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode(magic: str, header: dict, blocks) -> bytes:
    hb = dump_header(header)
    parts = [magic.encode("ascii"), struct.pack("<Q", len(hb)), hb]
    for b in blocks:
        parts.append(np.ascontiguousarray(b, dtype=F64).tobytes())
    return b"".join(parts)


def write(path, magic: str, header: dict, blocks) -> None:
    Path(path).write_bytes(encode(magic, header, blocks))


def decode_header(raw: bytes, magic: str, source="<bytes>"):
    """Return ``(header, payload_offset)``."""
    if len(raw) < 4:
        raise TruncatedFile(f"{source}: file shorter than the magic number")
    got = raw[:4]
    if got != magic.encode("ascii"):
        raise BadMagic(f"{source}: bad magic {got!r}, expected {magic!r}")
    if len(raw) < 12:
        raise TruncatedFile(f"{source}: truncated header length field")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + hlen:
        raise TruncatedFile(f"{source}: header truncated ({len(raw) - 12} of {hlen} bytes)")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{source}: unreadable JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError(f"{source}: header is not a JSON object")
    return header, 12 + hlen


def payload(raw: bytes, offset: int, n_values: int, source="<bytes>") -> np.ndarray:
    expected = n_values * 8
    have = len(raw) - offset
    if have < expected:
        raise TruncatedFile(f"{source}: payload truncated ({have} of {expected} bytes)")
    if have > expected:
        raise TrailingData(f"{source}: {have - expected} unexpected trailing bytes")
    return np.frombuffer(raw, dtype=F64, count=n_values, offset=offset).astype(float)


def read(path, magic: str):
    raw = Path(path).read_bytes()
    header, off = decode_header(raw, magic, str(path))
    return header, raw, off


def split_blocks(values: np.ndarray, shapes) -> list[np.ndarray]:
    out = []
    pos = 0
    for shape in shapes:
        size = int(np.prod(shape)) if len(shape) else 1
        out.append(values[pos:pos + size].reshape(shape).copy())
        pos += size
    return out
