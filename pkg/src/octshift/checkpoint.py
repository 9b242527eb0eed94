"""Checkpoint container shared by GAN and segmentation models.

    magic (8 bytes) | u32 metadata length | metadata JSON
    | u32 array count
    | per array: u32 name length, name, u32 ndim, ndim x u64 dims, f32 LE payload

Integer buffers (e.g. batch-norm step counters) are stored as f32 and cast
back to their module dtype on load.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import FormatError
from .volume import atomic_write_bytes

GAN_MAGIC = b"OCTGAN01"
SEG_MAGIC = b"OCTSEG01"


def encode(magic: bytes, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    doc = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(magic + struct.pack("<I", len(doc)) + doc)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        bname = name.encode("utf-8")
        buf.write(struct.pack("<I", len(bname)) + bname)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode(blob: bytes, magic: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if blob[:8] != magic:
        raise FormatError(f"bad checkpoint magic {blob[:8]!r}, expected {magic!r}")
    try:
        (n,) = struct.unpack_from("<I", blob, 8)
        pos = 12 + n
        meta = json.loads(blob[12:pos].decode("utf-8"))
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4 : pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (ndim,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos + 4)
            pos += 4 + 8 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(blob):
                raise FormatError(f"array {name!r} truncated")
            arrays[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    if pos != len(blob):
        raise FormatError("trailing bytes after last array")
    return meta, arrays


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = set(state) ^ set(arrays)
    if missing:
        raise FormatError(f"checkpoint/model parameter mismatch: {sorted(missing)[:5]}")
    module.load_state_dict({k: torch.from_numpy(np.array(arrays[k])).to(state[k].dtype) for k in state})


def save_module(path: str | os.PathLike, magic: bytes, module: torch.nn.Module, meta: Mapping[str, Any]) -> None:
    atomic_write_bytes(path, encode(magic, meta, state_arrays(module)))


def read(path: str | os.PathLike, magic: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)


def fingerprint(obj: Any) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
    doc = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(doc.encode("ascii")).hexdigest()
