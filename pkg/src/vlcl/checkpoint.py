"""Single-file checkpoint container with integrity and version checks.

Layout: 4-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then the raw array payload. The header records the format version,
caller metadata, an index of (name, dtype, shape, offset, nbytes) for every
array, and the SHA-256 of the payload. Arrays are stored little-endian and
row-major; loading verifies the digest before returning anything.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataFormatError, IntegrityError, VersionMismatch

MAGIC = b"VLCK"
FORMAT_VERSION = 1


def _le_dtype(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    if dtype.byteorder == ">":
        raise DataFormatError(f"big-endian arrays are not supported: {dtype}")
    return dtype.newbyteorder("<").str


def save_arrays(path: Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        src = np.asarray(arrays[name])
        # ascontiguousarray promotes 0-d to 1-d; restore the original shape.
        arr = np.ascontiguousarray(src).astype(_le_dtype(src.dtype), copy=False).reshape(src.shape)
        blob = arr.tobytes()
        index.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = {
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.asarray(len(header_bytes), dtype="<u8").tobytes())
        fh.write(header_bytes)
        fh.write(payload)


def load_arrays(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
    header_len = int(np.frombuffer(blob[4:12], dtype="<u8")[0])
    if len(blob) < 12 + header_len:
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable header: {exc}") from None
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    payload = blob[12 + header_len:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise IntegrityError(f"{path}: payload digest mismatch")
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise DataFormatError(f"{path}: array {entry['name']!r} overruns the payload")
        flat = np.frombuffer(payload[start:start + nbytes], dtype=entry["dtype"])
        arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
