"""Portable checkpoint archive.

Layout::

    8 bytes   magic  b"DARCKPT1"
    8 bytes   manifest length N, unsigned little-endian
    N bytes   UTF-8 JSON manifest
    ...       payload: every tensor as raw little-endian float32, in manifest order

The manifest is ``{"meta": {str: str}, "entries": [{"name", "dtype",
"shape", "offset", "nbytes"}], "payload_bytes": int}``. Offsets are
relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .networks import WeightStore

MAGIC = b"DARCKPT1"
_LE_F32 = np.dtype("<f4")


def save_checkpoint(store: WeightStore, path) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, tensor in store.entries.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype(_LE_F32, copy=False)
        blob = np.ascontiguousarray(arr).tobytes()
        entries.append(
            {"name": name, "dtype": "float32", "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"meta": {k: str(v) for k, v in store.meta.items()}, "entries": entries, "payload_bytes": offset},
        sort_keys=True,
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def is_checkpoint(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(len(MAGIC)) == MAGIC
    except OSError:
        return False


def load_checkpoint(path) -> WeightStore:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head = len(MAGIC) + 8
    if len(data) < head or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    (n,) = struct.unpack("<Q", data[len(MAGIC):head])
    if head + n > len(data):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[head : head + n].decode("utf-8"))
        meta = {str(k): str(v) for k, v in manifest["meta"].items()}
        specs = manifest["entries"]
        total = int(manifest["payload_bytes"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    payload = memoryview(data)[head + n :]
    if len(payload) != total:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest declares {total}")
    entries = {}
    for spec in specs:
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start, nbytes = int(spec["offset"]), int(spec["nbytes"])
        if spec.get("dtype") != "float32" or nbytes != 4 * count or start + nbytes > total:
            raise CheckpointError(f"{path}: bad entry for {spec.get('name')!r}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=_LE_F32).reshape(shape)
        entries[spec["name"]] = torch.from_numpy(arr.astype(np.float32, copy=True))
    return WeightStore(entries, meta)
