"""Self-describing binary container for trained models.

Layout: 8-byte magic, uint32 little-endian header length, a canonical JSON
header (version, model kind, free-form metadata, array names and shapes in
sorted order), then each array's raw row-major little-endian float64 bytes.
The encoding is canonical, so save -> load -> save reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ModelError

MAGIC = b"TGMF0001"
FORMAT_VERSION = 1


def save_model(path, kind: str, meta: dict, arrays: dict) -> None:
    """Write a model container. Arrays must be 1-D or 2-D float arrays."""
    entries = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.ndim not in (1, 2):
            raise ModelError(f"array {name!r} must be 1-D or 2-D, got shape {arr.shape}")
        entries.append({"name": name, "shape": list(arr.shape)})
    header = {
        "format": "tacgrasp-model",
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for entry in entries:
            arr = np.ascontiguousarray(np.asarray(arrays[entry["name"]], dtype=np.float64))
            f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_model(path):
    """Read a model container. Returns (kind, meta, arrays dict)."""
    path = Path(path)
    if not path.exists():
        raise ModelError(f"model file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise ModelError(f"{path} is not a model container (bad magic)")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    header_start = len(MAGIC) + 4
    header_end = header_start + header_len
    if len(blob) < header_end:
        raise ModelError(f"{path} is truncated inside the header")
    try:
        header = json.loads(blob[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"{path} has a corrupt header: {exc}") from exc
    if header.get("format") != "tacgrasp-model" or header.get("version") != FORMAT_VERSION:
        raise ModelError(
            f"{path}: unsupported container "
            f"(format={header.get('format')!r}, version={header.get('version')!r})"
        )
    arrays = {}
    offset = header_end
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(blob) < offset + nbytes:
            raise ModelError(f"{path} is truncated inside array {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ModelError(f"{path} has {len(blob) - offset} trailing bytes")
    return header["kind"], header["meta"], arrays
