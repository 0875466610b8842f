"""Bit-exact single-file dataset format ("PJF1").

Layout (little-endian throughout):

    magic  b"PJF1"
    u32    version (= 1)
    u32    metadata byte length
    bytes  UTF-8 JSON metadata (grid, channels, params, pool sizes, substeps)
    u32    record count
    per record:
        u64  trajectory seed
        u32  number of snapshots (T+1, intermediates included)
        u32  C, u32 H, u32 W
        f32  (T+1) * C * H * W values in (t, c, y, x) order
    u32    CRC32 of every byte after the magic (excluding this trailer)

Round-trips are byte-identical; single-byte corruption trips the CRC.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import (
    BadMagicError,
    CrcMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .fields import DatasetSplit, FieldSnapshot, Trajectory
from .numerics import Grid2D

__all__ = ["MAGIC", "VERSION", "save_dataset", "load_dataset"]

MAGIC = b"PJF1"
VERSION = 1


def _canonical_json(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_trajectory(t: Trajectory) -> bytes:
    c, h, w = t.snapshots[0].shape
    head = struct.pack("<QIIII", t.seed, len(t.snapshots), c, h, w)
    body = b"".join(
        np.ascontiguousarray(s.data, dtype="<f4").tobytes() for s in t.snapshots
    )
    return head + body


def save_dataset(path: str, split: DatasetSplit) -> None:
    pools = {"unlabeled": split.unlabeled, "labeled": split.labeled, "test": split.test}
    trajectories = split.unlabeled + split.labeled + split.test
    if not trajectories:
        raise ValueError("refusing to write an empty dataset")
    ref = trajectories[0]
    substeps = {}
    for name, pool in pools.items():
        for t in pool:
            if t.grid != ref.grid or t.channels != ref.channels:
                raise ValueError("all trajectories in a file must share grid and channels")
            if t.static_params != ref.static_params:
                raise ValueError("all trajectories in a file must share static params")
        # substeps may differ across pools (unlabeled records interleave
        # intermediates) but must be uniform within each pool
        counts = {t.substeps for t in pool}
        if len(counts) > 1:
            raise ValueError(f"{name} pool mixes substep layouts {sorted(counts)}")
        substeps[name] = counts.pop() if counts else 1

    meta = dict(split.meta)
    meta.update(
        {
            "grid": {"h": ref.grid.h, "w": ref.grid.w, "dt": ref.grid.dt},
            "channels": list(ref.channels),
            "params": {k: float(v) for k, v in ref.static_params.items()},
            "substeps": substeps,
            "pools": {name: len(pool) for name, pool in pools.items()},
        }
    )
    meta_bytes = _canonical_json(meta)

    body = bytearray()
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(meta_bytes))
    body += meta_bytes
    body += struct.pack("<I", len(trajectories))
    for t in trajectories:
        body += _pack_trajectory(t)

    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes(body))
        f.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"payload ends at byte {len(self.buf)}, needed {self.pos + n}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_dataset(path: str) -> DatasetSplit:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a PJF1 file")
    if len(raw) < 4 + 4 + 4:
        raise TruncatedFileError(f"{path}: shorter than the fixed header")

    body, trailer = raw[4:-4], raw[-4:]
    crc_stored = struct.unpack("<I", trailer)[0]
    crc_actual = zlib.crc32(body) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise CrcMismatchError(
            f"{path}: CRC mismatch (stored {crc_stored:#010x}, computed {crc_actual:#010x})"
        )

    r = _Reader(body)
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    n_records = r.u32()

    grid = Grid2D(h=meta["grid"]["h"], w=meta["grid"]["w"], dt=meta["grid"]["dt"])
    channels = tuple(meta["channels"])
    params = {k: float(v) for k, v in meta["params"].items()}
    pools = meta["pools"]
    n_u, n_l = pools["unlabeled"], pools["labeled"]
    substeps = meta.get("substeps", {})

    def pool_substeps(index: int) -> int:
        name = "unlabeled" if index < n_u else "labeled" if index < n_u + n_l else "test"
        return int(substeps.get(name, 1))

    trajectories: list[Trajectory] = []
    for i in range(n_records):
        seed = r.u64()
        n_snap, c, h, w = (r.u32() for _ in range(4))
        if (h, w) != grid.shape or c != len(channels):
            raise TruncatedFileError(
                f"{path}: record header ({n_snap},{c},{h},{w}) inconsistent with metadata"
            )
        count = n_snap * c * h * w
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(n_snap, c, h, w)
        snaps = [FieldSnapshot(channels, data[j].copy()) for j in range(n_snap)]
        trajectories.append(
            Trajectory(
                grid, seed, snaps, static_params=dict(params), substeps=pool_substeps(i)
            )
        )
    if r.pos != len(body):
        raise TruncatedFileError(f"{path}: {len(body) - r.pos} trailing bytes")

    if n_u + n_l + pools["test"] != len(trajectories):
        raise TruncatedFileError(f"{path}: pool sizes inconsistent with record count")
    return DatasetSplit(
        unlabeled=trajectories[:n_u],
        labeled=trajectories[n_u : n_u + n_l],
        test=trajectories[n_u + n_l :],
        meta=meta,
    )
