"""Self-describing binary tensor bundles.

Layout (all integers little-endian)::

    magic       4 bytes   identifies the artifact kind (e.g. b"DDPR")
    version     u16
    header_len  u32
    header      UTF-8 JSON: {"meta": {...}, "arrays": [{"name", "dtype",
                "shape", "offset", "nbytes", "packed"}, ...]}
    payload     concatenated raw array bytes

Floating arrays are stored as little-endian float64, integer arrays as
little-endian int64, and boolean arrays bit-packed (``np.packbits``,
little bit order). Reading back reproduces every array bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class FormatError(ValueError):
    """Raised when a file does not match the expected binary layout."""


def _encode_array(arr: np.ndarray) -> tuple[bytes, dict[str, Any]]:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        raw = np.packbits(arr.ravel(), bitorder="little").tobytes()
        return raw, {"dtype": "bool", "shape": list(arr.shape), "packed": True}
    if np.issubdtype(arr.dtype, np.integer):
        raw = np.ascontiguousarray(arr, dtype="<i8").tobytes()
        return raw, {"dtype": "int64", "shape": list(arr.shape), "packed": False}
    if np.issubdtype(arr.dtype, np.floating):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        return raw, {"dtype": "float64", "shape": list(arr.shape), "packed": False}
    raise TypeError(f"unsupported dtype {arr.dtype}")


def _decode_array(raw: bytes, entry: Mapping[str, Any]) -> np.ndarray:
    shape = tuple(entry["shape"])
    size = int(np.prod(shape, dtype=np.int64))
    if entry["dtype"] == "bool":
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
        return bits[:size].astype(bool).reshape(shape)
    dtype = {"int64": "<i8", "float64": "<f8"}[entry["dtype"]]
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype[1:], copy=True)


def dumps_bundle(magic: bytes, arrays: Mapping[str, np.ndarray],
                 meta: Mapping[str, Any] | None = None,
                 version: int = FORMAT_VERSION) -> bytes:
    """Serialize named arrays plus JSON metadata into one byte string."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw, entry = _encode_array(arr)
        entry.update(name=name, offset=offset, nbytes=len(raw))
        entries.append(entry)
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(magic, version, len(header)) + header + b"".join(chunks)


def loads_bundle(data: bytes, magic: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Inverse of :func:`dumps_bundle`; checks the magic bytes."""
    if len(data) < _PREFIX.size:
        raise FormatError("truncated bundle")
    got, version, hlen = _PREFIX.unpack_from(data, 0)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    arrays = {}
    for entry in header["arrays"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise FormatError(f"array {entry['name']!r} runs past end of file")
        arrays[entry["name"]] = _decode_array(data[lo:hi], entry)
    return arrays, header["meta"]


def save_bundle(path: str | Path, magic: bytes, arrays: Mapping[str, np.ndarray],
                meta: Mapping[str, Any] | None = None) -> int:
    data = dumps_bundle(magic, arrays, meta)
    Path(path).write_bytes(data)
    return len(data)


def load_bundle(path: str | Path, magic: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads_bundle(Path(path).read_bytes(), magic)
