"""Named-tensor checkpoint container.

Layout::

    SETLECKPT\\n
    <manifest length, 8-byte little-endian unsigned>
    <manifest JSON, utf-8>
    <tensor blobs, little-endian float32, concatenated in manifest order>

The manifest lists ``{"name", "shape", "offset", "nbytes"}`` per tensor sorted
by name, plus a free-form ``meta`` object.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"SETLECKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": FORMAT_VERSION, "tensors": entries, "meta": dict(meta or {})},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic at offset 0")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated manifest length at offset {pos}")
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    try:
        manifest = json.loads(data[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed manifest at offset {pos}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    pos += n
    out = {}
    for entry in manifest["tensors"]:
        start = pos + entry["offset"]
        raw = data[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} truncated at offset {start}")
        out[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float64)
    return out, manifest.get("meta", {})
