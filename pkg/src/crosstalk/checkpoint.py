"""Flat binary parameter files and checkpoint fusion.

File layout (all integers little-endian):
  magic "CSE1" | version u32 | count u32
  then per parameter: name_len u16 | name utf-8 | rank u8 | extents u32 each
  followed by the row-major float64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CSE1"
VERSION = 1


def save_params(path, params: dict) -> None:
    """Write a name -> array/Tensor mapping; insertion order is preserved."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, value in params.items():
            # asarray keeps rank-0 inputs rank-0; ascontiguousarray would not
            arr = np.asarray(getattr(value, "data", value), dtype=np.float64,
                             order="C")
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CheckpointError(f"parameter name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"parameter rank {arr.ndim} unsupported")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_params(path) -> dict:
    """Read a parameter file back into a name -> float64 ndarray mapping."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def average_checkpoints(paths) -> dict:
    """Elementwise mean over checkpoints with identical names and shapes."""
    paths = list(paths)
    if not paths:
        raise CheckpointError("average_checkpoints needs at least one path")
    acc = load_params(paths[0])
    names = list(acc.keys())
    for path in paths[1:]:
        other = load_params(path)
        if list(other.keys()) != names:
            raise CheckpointError(f"{path}: parameter names differ from {paths[0]}")
        for name in names:
            if other[name].shape != acc[name].shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: "
                    f"{other[name].shape} vs {acc[name].shape}"
                )
            acc[name] = acc[name] + other[name]
    k = float(len(paths))
    return {name: value / k for name, value in acc.items()}
