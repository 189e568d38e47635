"""Binary parameter checkpoints.

Layout: header (magic "PLMW", u32 tensor count), then per-tensor records of
u16 name length, UTF-8 name bytes, u8 rank, u32 extents, and 32-bit
little-endian float values in row-major order. Records are sorted by name so
files are byte-stable regardless of construction order.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import CheckpointMismatchError
from .tensor import Tensor

_MAGIC = b"PLMW"


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def save_params(path, params: Mapping[str, object]) -> None:
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", _MAGIC, len(names)))
        for name in names:
            arr = np.ascontiguousarray(_as_array(params[name]), dtype="<f4")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointMismatchError(f"parameter name too long: {name!r}")
            if arr.ndim > 0xFF:
                raise CheckpointMismatchError(f"parameter rank too large: {name!r}")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into float64 arrays keyed by parameter name."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8 or header[:4] != _MAGIC:
            raise CheckpointMismatchError(f"not a parameter checkpoint: {path}")
        (count,) = struct.unpack("<I", header[4:])
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise CheckpointMismatchError(f"truncated checkpoint record: {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return out


def assign_params(model_params: Mapping[str, Tensor], loaded: Mapping[str, np.ndarray]) -> None:
    """Copy loaded arrays into model tensors; names and shapes must match exactly."""
    missing = sorted(set(model_params) - set(loaded))
    extra = sorted(set(loaded) - set(model_params))
    if missing or extra:
        raise CheckpointMismatchError(f"checkpoint mismatch: missing={missing[:5]}, unexpected={extra[:5]}")
    for name, tensor in model_params.items():
        arr = loaded[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointMismatchError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {tensor.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype)
