"""Writer for the portable tensor archive format consumed by the pruning
engine.

Layout: 5-byte magic ``MDPT1``, little-endian uint32 manifest length, JSON
manifest listing (name, dtype tag, shape, offset, nbytes, crc32) per entry
plus an optional ``meta`` dict, then raw little-endian payloads.
"""
from __future__ import annotations

import json
import struct
import zlib
from typing import Mapping

import numpy as np

MAGIC = b"MDPT1"

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class ArchiveError(ValueError):
    pass


def write_archive(path, tensors: Mapping[str, np.ndarray],
                  meta: dict | None = None) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise ArchiveError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        tag = _TAGS[arr.dtype]
        raw = np.ascontiguousarray(arr).astype(_DTYPES[tag], copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": tag,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "crc32": zlib.crc32(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    manifest = {"entries": entries}
    if meta is not None:
        manifest["meta"] = meta
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read-back used for verification; checksums every payload."""
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != MAGIC:
            raise ArchiveError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        payload = f.read()
    tensors: dict[str, np.ndarray] = {}
    for ent in manifest["entries"]:
        raw = payload[ent["offset"]: ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise ArchiveError(f"truncated payload for {ent['name']!r}")
        if zlib.crc32(raw) != ent["crc32"]:
            raise ArchiveError(f"checksum mismatch for {ent['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[ent["dtype"]]).reshape(ent["shape"])
        tensors[ent["name"]] = arr.copy()
    return tensors, manifest.get("meta", {})
