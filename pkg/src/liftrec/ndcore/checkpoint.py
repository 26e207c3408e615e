"""Binary parameter checkpoints.

Layout (little-endian)::

    b"LIFTPARM" | version u32 | count u32
    per parameter: name_len u32 | name utf-8 | rank u32 | dims u32[rank] | float64[prod(dims)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import CorruptCheckpointError
from .params import ParamStore

MAGIC = b"LIFTPARM"
VERSION = 1


def dumps(state: dict[str, np.ndarray] | ParamStore) -> bytes:
    if isinstance(state, ParamStore):
        state = {k: t.data for k, t in state.items()}
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CorruptCheckpointError("bad magic, not a parameter checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + n > len(buf):
                raise CorruptCheckpointError("truncated parameter name")
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise CorruptCheckpointError(f"truncated data for parameter {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - pos} trailing bytes after last parameter")
    return out


def save_params(store: ParamStore | dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(dumps(store))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
