"""Checkpoint readers: safetensors (parsed directly from the on-disk layout)
and npz containers. Both are read-only on the source file."""
from __future__ import annotations

import json
import struct
import zipfile

import numpy as np


class SourceError(ValueError):
    pass


_ST_DTYPES = {
    "F16": np.dtype("<f2"),
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
    "BF16": None,  # recognized but unsupported
}


def read_safetensors(path) -> dict[str, np.ndarray]:
    """Parse a safetensors file: 8-byte little-endian header length, JSON
    header mapping names to dtype/shape/data_offsets, then one flat buffer."""
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8:
            raise SourceError(f"{path}: too short for a safetensors header")
        (hlen,) = struct.unpack("<Q", head)
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise SourceError(f"{path}: bad safetensors header: {e}") from None
        buf = f.read()
    tensors = {}
    for name, ent in header.items():
        if name == "__metadata__":
            continue
        dtype = _ST_DTYPES.get(ent.get("dtype"))
        if dtype is None:
            raise SourceError(f"{path}: tensor {name!r} has unsupported dtype "
                              f"{ent.get('dtype')!r}")
        start, end = ent["data_offsets"]
        raw = buf[start:end]
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        if len(raw) != n * dtype.itemsize:
            raise SourceError(f"{path}: payload size mismatch for {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(ent["shape"]).copy()
    return tensors


def write_safetensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Minimal writer, used by tests and for exporting toy checkpoints."""
    rev = {v: k for k, v in _ST_DTYPES.items() if v is not None}
    header = {}
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in rev:
            raise SourceError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        header[name] = {"dtype": rev[arr.dtype], "shape": list(arr.shape),
                        "data_offsets": [offset, offset + len(raw)]}
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def read_npz(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path) as z:
            return {name: z[name] for name in z.files}
    except (OSError, zipfile.BadZipFile, ValueError) as e:
        raise SourceError(f"{path}: not a readable npz container: {e}") from None


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Dispatch on extension: .safetensors or .npz."""
    p = str(path)
    if p.endswith(".safetensors"):
        return read_safetensors(p)
    if p.endswith(".npz"):
        return read_npz(p)
    raise SourceError(f"{p}: unknown checkpoint format "
                      "(expected .safetensors or .npz)")
