"""Versioned checkpoint files.

Layout::

    b"ZVFORGE1"                       8-byte magic
    uint64 little-endian              manifest length in bytes
    manifest                          UTF-8 JSON: {"format", "meta", "params": [{name, shape, offset}]}
    data                              little-endian float32 arrays, offsets relative to this section

The manifest is serialised with sorted keys and parameters in name order, so
saving the same state twice produces identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

MAGIC = b"ZVFORGE1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(np.asarray(params[name]), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format": FORMAT_VERSION, "meta": meta or {}, "params": entries}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def _read_header(fh, path) -> Tuple[dict, int]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw)
    try:
        manifest = json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format')!r}")
    return manifest, len(MAGIC) + 8 + n


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        manifest, _ = _read_header(fh, path)
    return manifest


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        manifest, start = _read_header(fh, path)
        fh.seek(0)
        buf = fh.read()
    data = memoryview(buf)[start:]
    params = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        hi = lo + 4 * count
        if hi > len(data):
            raise CheckpointError(f"{path}: parameter {entry['name']} runs past end of file")
        arr = np.frombuffer(data[lo:hi], dtype="<f4").astype(np.float32).reshape(entry["shape"])
        params[entry["name"]] = arr
    return params, manifest.get("meta", {})
