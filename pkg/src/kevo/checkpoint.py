"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"KEVO" | u32 version | payload | u32 crc32(payload)

    payload = u32 n_tensors
              n_tensors * (u32 name_len | name | u32 rank | rank * u64 dim |
                           u8 dtype_tag | raw float32 data)
              u32 mask_len | mask JSON (utf-8, may be empty)
              u32 meta_len | metadata JSON (utf-8)

Files are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .fileio import atomic_write
from .splitting import SplitMask, mask_from_dict, mask_to_dict

MAGIC = b"KEVO"
VERSION = 1
DTYPE_F32 = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    masks: dict[str, SplitMask] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def mask(self) -> SplitMask | None:
        return self.masks.get("current")


def encode_checkpoint(params: dict[str, np.ndarray], masks: dict[str, SplitMask] | None = None,
                      meta: dict | None = None) -> bytes:
    parts = [struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    mask_blob = b""
    if masks:
        mask_blob = json.dumps({k: mask_to_dict(m) for k, m in masks.items()}).encode()
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(mask_blob)) + mask_blob)
    parts.append(struct.pack("<I", len(meta_blob)) + meta_blob)
    payload = b"".join(parts)
    return MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError("not a kevo checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    payload, (crc,) = raw[8:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupted or partially written)")
    try:
        return _decode_payload(payload)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint payload: {exc}") from None


def _decode_payload(payload: bytes) -> Checkpoint:
    pos = 0

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, payload, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = payload[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        (tag,) = take("<B")
        if tag != DTYPE_F32:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        params[name] = arr.astype(np.float32)
    (mlen,) = take("<I")
    masks = {}
    if mlen:
        masks = {k: mask_from_dict(v) for k, v in json.loads(payload[pos:pos + mlen]).items()}
    pos += mlen
    (tlen,) = take("<I")
    meta = json.loads(payload[pos:pos + tlen])
    pos += tlen
    if pos != len(payload):
        raise CheckpointError(f"{len(payload) - pos} trailing bytes in checkpoint payload")
    return Checkpoint(params, masks, meta)


def save_checkpoint(path, params: dict[str, np.ndarray], masks: dict[str, SplitMask] | None = None,
                    meta: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(params, masks, meta))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(raw)
