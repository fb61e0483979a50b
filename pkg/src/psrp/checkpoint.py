"""Versioned binary checkpoint: a JSON header followed by named, shape-tagged blobs.

Layout::

    b"PSRPCKPT" | uint32 version | uint64 header length | header JSON | blob bytes

The header records the config snapshot, iteration counter, free-form metadata
and, for every blob, its name, dtype, shape, byte offset and length.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"PSRPCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    config: dict
    iteration: int
    blobs: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def tensors(self, prefix: str) -> dict[str, torch.Tensor]:
        n = len(prefix)
        return {k[n:]: torch.from_numpy(v.copy()) for k, v in self.blobs.items() if k.startswith(prefix)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(ckpt.blobs):
        arr = np.asarray(ckpt.blobs[name])
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {"version": ckpt.version, "config": ckpt.config, "iteration": ckpt.iteration, "meta": ckpt.meta, "blobs": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return _PREFIX.pack(MAGIC, ckpt.version, len(header)) + header + b"".join(chunks)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise FormatError("checkpoint is truncated")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start : start + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint header ({exc})") from exc
    base = start + hlen
    blobs = {}
    for entry in header["blobs"]:
        lo = base + entry["offset"]
        buf = raw[lo : lo + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise FormatError(f"blob {entry['name']!r} is truncated")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        blobs[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(tuple(entry["shape"])).astype(dtype.newbyteorder("="))
    return Checkpoint(header["config"], header["iteration"], blobs, header.get("meta", {}), version)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
