"""Binary tensor dumps and named-parameter checkpoints.

Tensor dump (``CRTT``)::

    b"CRTT" | u8 rank | rank x u32 LE extents | float32 LE values, row-major

Checkpoint (``CRTC``)::

    b"CRTC" | u32 version | 32-byte SHA-256 of the model config JSON
    | u32 config length | config JSON (UTF-8) | u64 step | u32 entry count
    | entries: u32 name length | UTF-8 name | CRTT tensor
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

TENSOR_MAGIC = b"CRTT"
CHECKPOINT_MAGIC = b"CRTC"
CHECKPOINT_VERSION = 1


def write_tensor(stream: BinaryIO, value) -> None:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.ndim > 255:
        raise CheckpointError("rank above 255 cannot be encoded")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<B", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated stream: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(stream: BinaryIO) -> np.ndarray:
    if _read_exact(stream, 4) != TENSOR_MAGIC:
        raise CheckpointError("bad tensor magic (expected CRTT)")
    (rank,) = struct.unpack("<B", _read_exact(stream, 1))
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(stream, 4 * count), dtype="<f4")
    return data.astype(np.float32).reshape(shape)


def dump_tensor(path: str | Path, value) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, value)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_to_bytes(value) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, value)
    return buf.getvalue()


@dataclass
class Checkpoint:
    config_json: str
    config_hash: bytes
    step: int
    entries: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, config_json: str, config_hash: bytes, step: int,
                    entries: dict[str, np.ndarray]) -> None:
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes (SHA-256)")
    cfg = config_json.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(config_hash)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<QI", step, len(entries)))
        for name, value in entries.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, value)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        digest = _read_exact(fh, 32)
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        cfg = _read_exact(fh, cfg_len).decode("utf-8")
        step, count = struct.unpack("<QI", _read_exact(fh, 12))
        entries = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            entries[name] = read_tensor(fh)
    return Checkpoint(cfg, digest, step, entries)
