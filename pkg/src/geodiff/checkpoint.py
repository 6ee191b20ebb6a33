"""Flat binary tensor container with a JSON manifest.

Layout of a ``.gdck`` file::

    b"GDCK" | u32 version | u64 manifest_len | manifest JSON | payload

The manifest lists every tensor as {name, shape, dtype, offset} with offsets
relative to the payload start, plus a free-form ``meta`` dict (model config,
noise-schedule parameters, trajectory metadata).  Tensors are float32 by
default; float64 is allowed per entry.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"GDCK"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors: Dict[str, np.ndarray], meta: dict | None = None,
                 dtype: str = "f4") -> None:
    """Write named arrays plus metadata. ``dtype`` is the storage precision."""
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported storage dtype {dtype!r}")
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPES[dtype])
        entries.append({
            "name": name,
            "shape": list(a.shape),
            "dtype": dtype,
            "offset": offset,
        })
        blobs.append(a.tobytes())
        offset += len(blobs[-1])
    manifest = json.dumps({
        "format": "gdck",
        "version": VERSION,
        "tensors": entries,
        "meta": meta or {},
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read back (tensors, meta). Arrays come out float64 regardless of storage."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a gdck file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        payload = f.read()
    tensors: Dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        dt = _DTYPES[e["dtype"]]
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        raw = payload[start : start + n * dt.itemsize]
        if len(raw) != n * dt.itemsize:
            raise CheckpointError(f"{path}: truncated tensor {e['name']!r}")
        tensors[e["name"]] = (
            np.frombuffer(raw, dtype=dt).astype(np.float64).reshape(e["shape"])
        )
    return tensors, manifest.get("meta", {})
