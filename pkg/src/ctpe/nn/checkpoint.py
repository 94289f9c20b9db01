"""Checkpoint container: named float32 tensors in a little-endian binary file.

Layout::

    magic   4 bytes  "E3DC"
    version u32      currently 1
    arch    u64      hash of the Architecture that produced the weights
    count   u32      number of tensors
    tensor  repeated: name_len u16, name utf-8, rank u8, extents u32 * rank,
                      payload float32 little-endian, C order

A checkpoint carries every trainable parameter, the batch-norm running
statistics, the optimizer moments and step count, and any extra scalar
counters the trainer wants (e.g. the epoch index), so reloading resumes
training bit-exactly for float32 models.
"""

from __future__ import annotations

import io
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .model import Cnn3d
from .optim import Adam

MAGIC = b"E3DC"
VERSION = 1


@contextmanager
def _as_stream(target, mode: str):
    if isinstance(target, (str, Path)):
        with open(target, mode) as fh:
            yield fh
    else:
        yield target


def write_tensors(destination, arch_hash: int, tensors: dict[str, np.ndarray]) -> int:
    """Write named tensors; returns bytes written."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", arch_hash))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    payload = buf.getvalue()
    with _as_stream(destination, "wb") as fh:
        fh.write(payload)
    return len(payload)


def read_tensors(source) -> tuple[int, dict[str, np.ndarray]]:
    """Read (arch_hash, tensors) from a checkpoint."""
    with _as_stream(source, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise FormatError(f"not a checkpoint: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (arch_hash,) = struct.unpack_from("<Q", raw, 8)
    (count,) = struct.unpack_from("<I", raw, 16)
    pos = 20
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated checkpoint while reading tensor {len(tensors)}") from exc
        tensors[name] = arr.copy()
    return arch_hash, tensors


def save_model(destination, model: Cnn3d, optimizer: Adam | None = None, counters: dict[str, int] | None = None) -> int:
    tensors: dict[str, np.ndarray] = {}
    tensors.update(model.parameters())
    tensors.update(model.running_stats())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    for key, value in (counters or {}).items():
        tensors[f"counter.{key}"] = np.asarray([float(value)], dtype=np.float32)
    return write_tensors(destination, model.arch.hash64(), tensors)


def load_model(source, model: Cnn3d, optimizer: Adam | None = None) -> dict[str, int]:
    """Restore weights (and optimizer state) in place; returns stored counters.

    The checkpoint's architecture hash must match the model's.
    """
    arch_hash, tensors = read_tensors(source)
    if arch_hash != model.arch.hash64():
        raise FormatError(
            f"checkpoint architecture hash {arch_hash:#018x} does not match the model's "
            f"{model.arch.hash64():#018x} ({model.arch.canonical()})"
        )
    expected = {**model.parameters(), **model.running_stats()}
    for name in expected:
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name}")
        model.set_parameter(name, tensors[name])
    if optimizer is not None:
        if "adam.step" not in tensors:
            raise FormatError("checkpoint holds no optimizer state")
        optimizer.load_state_tensors(tensors, model.parameters())
    return {
        key.removeprefix("counter."): int(arr[0]) for key, arr in tensors.items() if key.startswith("counter.")
    }
