"""Checkpoint archive: JSON manifest plus one little-endian float32 blob.

An archive is a directory holding ``manifest.json`` and ``tensors.bin``.  The
manifest records the format version, free-form metadata and one entry per
tensor (name, shape, byte offset); the blob is the concatenation of all
tensors as raw little-endian float32.  Round-trips are bitwise: loading and
re-saving an archive reproduces identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CorruptBlob, IoError, VersionMismatch

FORMAT_VERSION = 1

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"


def save_archive(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> Path:
    """Write an archive directory; tensor order follows dict insertion order."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset}
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "blob_bytes": offset,
        "meta": meta,
        "tensors": entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (root / BLOB_NAME).write_bytes(b"".join(chunks))
    return root


def load_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read an archive; raises VersionMismatch / CorruptBlob on bad files."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    bpath = root / BLOB_NAME
    if not mpath.is_file() or not bpath.is_file():
        raise IoError(f"checkpoint archive incomplete at {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptBlob(f"manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"archive format {version!r}, expected {FORMAT_VERSION}")
    blob = bpath.read_bytes()
    if len(blob) != manifest.get("blob_bytes"):
        raise CorruptBlob(
            f"blob is {len(blob)} bytes, manifest expects {manifest.get('blob_bytes')}"
        )
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(blob):
            raise CorruptBlob(f"tensor {entry['name']!r} overruns the blob")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return manifest["meta"], tensors
