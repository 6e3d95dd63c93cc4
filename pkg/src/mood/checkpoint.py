"""Tensor checkpoint container used for model and Gaussian persistence.

Layout: u64 little-endian header length, then a UTF-8 JSON header, then raw
little-endian tensor payloads. The header holds free-form metadata plus a
tensor directory of (name, dtype, shape, offset, length); offsets are
relative to the end of the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .datamodel import atomic_write_bytes
from .errors import FormatError

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


def write_checkpoint(path: str | Path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    directory = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {dtype_name}")
        raw = arr.astype(_DTYPES[dtype_name], copy=False).tobytes()
        directory.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(arr.shape),
                "offset": offset,
                "length": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "meta": meta, "tensors": directory}, sort_keys=True
    ).encode("utf-8")
    blob = struct.pack("<Q", len(header)) + header + b"".join(payloads)
    atomic_write_bytes(path, blob)


def read_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: too short for a checkpoint")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from exc
    base = 8 + header_len
    tensors: dict[str, np.ndarray] = {}
    try:
        for entry in header["tensors"]:
            dtype = _DTYPES.get(entry["dtype"])
            if dtype is None:
                raise FormatError(f"{path}: unsupported dtype {entry['dtype']!r}")
            start = base + entry["offset"]
            end = start + entry["length"]
            if end > len(blob):
                raise FormatError(f"{path}: tensor {entry['name']!r} exceeds file size")
            arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(entry["shape"])
            tensors[entry["name"]] = arr.astype(dtype.base, copy=True)
        return header["kind"], header["meta"], tensors
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed tensor directory: {exc}") from exc
