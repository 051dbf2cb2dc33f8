"""Checkpoint-to-archive conversion."""
from __future__ import annotations

import hashlib

import numpy as np

from .archive import write_archive
from .select import LayerSelection, select_tensors
from .sources import load_checkpoint


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _apply_dtype_policy(arr: np.ndarray, preserve: bool) -> np.ndarray:
    """Default: everything becomes f64, matching the engine's numerics.
    With preserve, f32/f64 pass through; f16 is widened to f32 since the
    archive format has no half-precision tag."""
    if not preserve:
        return arr.astype(np.float64)
    if arr.dtype == np.float16:
        return arr.astype(np.float32)
    return arr


def import_checkpoint(src, selection: LayerSelection, out,
                      preserve_dtype: bool = False) -> dict:
    """Convert a checkpoint into the portable archive. Returns the manifest
    meta that was written (source path, source checksum, per-tensor checksums)."""
    tensors = load_checkpoint(src)
    selected = select_tensors(tensors, selection)
    converted = {name: _apply_dtype_policy(arr, preserve_dtype)
                 for name, arr in sorted(selected.items())}
    meta = {
        "source": str(src),
        "source_sha256": _sha256_file(src),
        "dtype_policy": "preserve" if preserve_dtype else "f64",
        "tensors": {name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
                    for name, arr in converted.items()},
    }
    write_archive(out, converted, meta)
    return meta
