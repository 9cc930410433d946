"""Binary array container shared by checkpoints and raw tensor dumps.

Layout: the magic ``VTOK1`` followed by records of
``u32 name_len | name (utf-8) | u32 rank | u32 extents[rank] | f64 values``,
all little-endian, until end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTOK1"


class CheckpointError(ValueError):
    pass


def dump_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name in arrays:
        arr = np.asarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def load_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("missing VTOK1 magic")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            end = pos + 8 * count
            if end > len(blob):
                raise CheckpointError(f"truncated values for {name}")
            out[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"truncated record: {exc}") from exc
    return out


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dump_arrays(arrays))
    tmp.replace(path)


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    return load_arrays(Path(path).read_bytes())
