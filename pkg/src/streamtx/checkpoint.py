"""Versioned checkpoint container: named float64 tensors plus a JSON meta block.

Layout: magic line, one JSON header line (format version, metadata, tensor
directory with shapes and byte offsets), then the raw little-endian float64
blobs back to back.  Writing the same tensors twice yields identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"STREAMTX-CKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header_bytes)
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"checkpoint {path}: bad magic, not a checkpoint file")
    body = raw[len(MAGIC):]
    newline = body.index(b"\n")
    header = json.loads(body[:newline].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"checkpoint {path}: unsupported format version {header.get('format_version')}")
    blob_base = newline + 1
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = blob_base + entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, header["meta"]
