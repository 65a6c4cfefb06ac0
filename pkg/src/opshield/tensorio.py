"""Little-endian tensor records and flat ``key=value`` blocks shared by checkpoints.

Tensor record: ``u32 name_len, name (utf-8), u32 rank, u32 dims[rank], f32 data`` (row-major).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


def pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def unpack_tensor(buf: bytes, pos: int) -> tuple[str, np.ndarray, int]:
    try:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        end = pos + 4 * size
        if end > len(buf):
            raise FormatError(0, f"tensor {name!r} truncated")
        arr = np.frombuffer(buf[pos:end], dtype="<f4").reshape(dims).astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(0, f"corrupt tensor record: {exc}") from None
    return name, arr, end


def pack_block(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def unpack_block(buf: bytes, pos: int) -> tuple[str, int]:
    try:
        (n,) = struct.unpack_from("<I", buf, pos)
    except struct.error:
        raise FormatError(0, "truncated text block") from None
    pos += 4
    if pos + n > len(buf):
        raise FormatError(0, "truncated text block")
    return buf[pos : pos + n].decode("utf-8"), pos + n


def format_kv(pairs: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs.items())


def parse_kv(text: str) -> dict:
    out = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(line_no, f"expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
