"""``GFMK1`` model snapshots.

Layout::

    b"GFMK1" | uint64 LE manifest length | UTF-8 JSON manifest | float64 LE data

The manifest lists every tensor as ``{name, shape, offset}`` (offset in
bytes from the start of the data block) and echoes the run configuration,
mask mode and prior keep-probability.  Tensors are stored in sorted name
order so equal parameters always give equal bytes.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"GFMK1"
_LEN = struct.Struct("<Q")


class SnapshotError(ValueError):
    """Unreadable snapshot or one that does not fit the model being loaded."""


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")  # tobytes() is C-order; keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"tensors": entries, "meta": dict(meta or {})}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(header)) + header + b"".join(blobs)


def decode(raw: bytes, name: str = "<snapshot>") -> tuple[dict[str, np.ndarray], dict]:
    if raw[: len(MAGIC)] != MAGIC:
        raise SnapshotError(f"{name}: missing GFMK1 magic header")
    start = len(MAGIC) + _LEN.size
    if len(raw) < start:
        raise SnapshotError(f"{name}: truncated header")
    (n,) = _LEN.unpack_from(raw, len(MAGIC))
    try:
        manifest = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"{name}: corrupt manifest ({exc})") from None
    data = memoryview(raw)[start + n :]
    tensors = {}
    for entry in manifest.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = entry["offset"]
        if lo + 8 * count > len(data):
            raise SnapshotError(f"{name}: tensor {entry['name']} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(data[lo : lo + 8 * count], dtype="<f8").astype(np.float64).reshape(shape)
    return tensors, manifest.get("meta", {})


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors, meta))
    return path


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    return decode(raw, str(path))


def assign(params: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    """Copy snapshot tensors into live parameters, requiring identical names and shapes."""
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise SnapshotError(f"snapshot does not match model (missing {missing[:5]}, unexpected {extra[:5]})")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise SnapshotError(f"{name}: snapshot shape {tensors[name].shape} != model shape {p.data.shape}")
        p.data[...] = tensors[name]
