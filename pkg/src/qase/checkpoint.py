"""Single-file checkpoints: a JSON manifest followed by a flat float32 payload.

Layout::

    b"QASECKPT"                 8-byte magic
    uint64 little-endian        manifest length in bytes
    manifest                    UTF-8 JSON, keys sorted
    payload                     little-endian float32 values, tensors back to back

Each manifest tensor entry records name, shape, dtype and byte offset into the
payload, so a reader can pull a subset of tensors (e.g. the generator only)
without touching the rest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QASECKPT"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in chunks:
            f.write(raw)


def read_manifest(path) -> tuple[dict, list[dict], int]:
    """(meta, tensor entries, payload start offset)."""
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(p, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        try:
            manifest = json.loads(f.read(n))
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: corrupt manifest ({e.msg})") from None
    return manifest["meta"], manifest["tensors"], len(MAGIC) + 8 + n


def load_checkpoint(path, prefix: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read the manifest and every tensor whose name starts with ``prefix`` (all if None)."""
    meta, entries, base = read_manifest(path)
    out = {}
    with open(path, "rb") as f:
        for e in entries:
            if prefix is not None and not e["name"].startswith(prefix):
                continue
            count = int(np.prod(e["shape"], dtype=np.int64))
            f.seek(base + e["offset"])
            raw = f.read(count * _DTYPE.itemsize)
            if len(raw) != count * _DTYPE.itemsize:
                raise CheckpointError(f"{path}: truncated payload for tensor {e['name']}")
            out[e["name"]] = np.frombuffer(raw, dtype=_DTYPE).reshape(e["shape"]).copy()
    return meta, out


def drop_tensors(src, dst, prefix: str) -> int:
    """Rewrite ``src`` to ``dst`` without the tensors under ``prefix``; returns how many were dropped."""
    meta, tensors = load_checkpoint(src)
    kept = {k: v for k, v in tensors.items() if not k.startswith(prefix)}
    save_checkpoint(dst, kept, meta)
    return len(tensors) - len(kept)
