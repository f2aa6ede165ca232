"""Single-file binary tensor container used for checkpoints, datasets and dumps.

File layout:

    bytes 0..7      magic ``b"TNSRBOX1"``
    bytes 8..15     u64 little-endian manifest byte length H
    bytes 16..16+H  UTF-8 JSON manifest
    remainder       payload: raw row-major tensor bytes, little-endian

The manifest is ``{"entries": [...], "metadata": {...}}`` where each entry is
``{"name": str, "dtype": "f32"|"f64", "shape": [int, ...], "offset": int,
"byte_len": int}`` with offsets relative to the payload start, and metadata is
a flat string-to-string mapping.  Entry order is preserved, names are unique,
and files written on any host load on any other (byte order is pinned, never
inherited from the writer).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"TNSRBOX1"

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class ContainerError(Exception):
    """Malformed container file or invalid save input."""


def _dtype_tag(arr: np.ndarray) -> str:
    tag = _TAG_FOR_KIND.get(arr.dtype.newbyteorder("="))
    if tag is None:
        raise ContainerError(
            f"unsupported dtype {arr.dtype}; containers hold f32 or f64 tensors"
        )
    return tag


def save_container(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    metadata: dict[str, str] | None = None,
) -> None:
    """Write named tensors plus string metadata to ``path`` atomically enough
    for our purposes (full buffer assembled in memory, single write)."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        if not isinstance(name, str) or not name:
            raise ContainerError("tensor names must be non-empty strings")
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": tag,
                "shape": [int(s) for s in arr.shape],
                "offset": offset,
                "byte_len": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)

    meta = {}
    for key, value in (metadata or {}).items():
        if not isinstance(key, str) or not isinstance(value, str):
            raise ContainerError("metadata must map strings to strings")
        meta[key] = value

    manifest = json.dumps({"entries": entries, "metadata": meta}).encode("utf-8")
    header = MAGIC + np.uint64(len(manifest)).tobytes()
    if int(np.uint64(len(manifest))) != len(manifest):  # pragma: no cover
        raise ContainerError("manifest too large")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a container back as ``(tensors, metadata)``.

    Raises ContainerError with a distinct message for a bad magic, a
    truncated header/manifest, a truncated payload, or an entry whose
    byte length disagrees with its shape and dtype.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ContainerError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:8]!r}")
    header_len = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    if 16 + header_len > len(raw):
        raise ContainerError(f"{path}: truncated manifest (wants {header_len} bytes)")
    try:
        manifest = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
        entries = manifest["entries"]
        metadata = dict(manifest["metadata"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ContainerError(f"{path}: malformed manifest: {exc}") from exc

    payload = raw[16 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        try:
            name = entry["name"]
            dtype = _DTYPE_TAGS[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            byte_len = int(entry["byte_len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"{path}: malformed manifest entry: {exc}") from exc
        if name in tensors:
            raise ContainerError(f"{path}: duplicate tensor name {name!r}")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if byte_len != expected:
            raise ContainerError(
                f"{path}: entry {name!r} length mismatch: "
                f"manifest says {byte_len} bytes, shape implies {expected}"
            )
        if offset < 0 or offset + byte_len > len(payload):
            raise ContainerError(f"{path}: truncated payload for entry {name!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=expected // dtype.itemsize, offset=offset)
        # copy out of the file buffer and normalize to native byte order
        tensors[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
    return tensors, metadata
