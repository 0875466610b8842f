"""Bit-exact checkpoint container ("PJCK").

Layout (little-endian):

    magic  b"PJCK"
    u32    version (= 1)
    u32    tensor count
    per tensor (sorted by name):
        u16  name byte length, name (UTF-8)
        u8   ndim, u32 dims...
        f32  data
    u32    CRC32 of every byte after the magic (excluding this trailer)

Everything is float32, including metadata: the JSON config echo and step
counter travel as byte-valued tensors under reserved ``__meta__`` names.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np
import torch.nn as nn

from ..errors import (
    BadMagicError,
    CheckpointShapeError,
    CrcMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

__all__ = ["save_checkpoint", "load_checkpoint", "load_into_module", "module_tensors"]

MAGIC = b"PJCK"
VERSION = 1
_META_KEY = "__meta_json__"


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """float32 copies of a module's state dict under an optional name prefix."""
    out = {}
    for name, t in module.state_dict().items():
        out[prefix + name] = t.detach().cpu().numpy().astype("<f4")
    return out


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    items = dict(tensors)
    if _META_KEY in items:
        raise ValueError(f"{_META_KEY} is reserved")
    if meta is not None:
        payload = np.frombuffer(
            json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"),
            dtype=np.uint8,
        )
        items[_META_KEY] = payload.astype("<f4")

    body = bytearray()
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(items))
    for name in sorted(items):
        # asarray keeps 0-d shapes (ascontiguousarray would promote to 1-d)
        arr = np.asarray(items[name], dtype="<f4", order="C")
        name_b = name.encode("utf-8")
        body += struct.pack("<H", len(name_b))
        body += name_b
        body += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            body += struct.pack("<I", d)
        body += arr.tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes(body))
        f.write(struct.pack("<I", crc))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a PJCK file")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")
    body, trailer = raw[4:-4], raw[-4:]
    crc_stored = struct.unpack("<I", trailer)[0]
    if crc_stored != (zlib.crc32(body) & 0xFFFFFFFF):
        raise CrcMismatchError(f"{path}: CRC mismatch")

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedFileError(f"{path}: tensor table overruns the payload")
        out = body[pos : pos + n]
        pos += n
        return out

    version = struct.unpack("<I", take(4))[0]
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    count = struct.unpack("<I", take(4))[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2))[0]
        name = take(name_len).decode("utf-8")
        ndim = struct.unpack("<B", take(1))[0]
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n_el = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * n_el), dtype="<f4").reshape(shape)
        tensors[name] = data.copy()
    if pos != len(body):
        raise TruncatedFileError(f"{path}: {len(body) - pos} trailing bytes")

    meta = None
    if _META_KEY in tensors:
        raw_meta = tensors.pop(_META_KEY)
        meta = json.loads(raw_meta.astype(np.uint8).tobytes().decode("utf-8"))
    return tensors, meta


def load_into_module(
    module: nn.Module, tensors: dict[str, np.ndarray], prefix: str = ""
) -> None:
    """Copy checkpoint tensors into a module, validating names and shapes."""
    import torch

    state = module.state_dict()
    new_state = {}
    for name, current in state.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointShapeError(f"checkpoint is missing tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(current.shape):
            raise CheckpointShapeError(
                f"tensor {key!r} has shape {tuple(arr.shape)}, "
                f"model expects {tuple(current.shape)}"
            )
        new_state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(current.dtype)
    module.load_state_dict(new_state)
