"""Binary tensor container.

Layout: 8-byte little-endian header length ``N``, ``N`` bytes of JSON header,
then the raw little-endian payload. The header maps each tensor name to
``{"dtype": "f32"|"f16", "shape": [...], "offset": int, "length": int}`` with
offsets relative to the start of the payload. An optional ``__metadata__``
entry carries free-form string data.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
META_KEY = "__metadata__"


class ContainerError(ValueError):
    """Malformed or inconsistent tensor container."""


def write_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray], *,
                  dtype: str = "f32", metadata: dict | None = None) -> None:
    if dtype not in DTYPES:
        raise ContainerError(f"unsupported dtype {dtype!r}")
    header: dict = {}
    if metadata is not None:
        header[META_KEY] = metadata
    chunks = []
    offset = 0
    for name in sorted(tensors):
        raw = np.ascontiguousarray(tensors[name], dtype=DTYPES[dtype]).tobytes()
        header[name] = {"dtype": dtype, "shape": list(np.shape(tensors[name])),
                        "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, metadata)``; f16 payloads are widened to float32."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ContainerError(f"{path}: truncated header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if 8 + n > len(blob):
        raise ContainerError(f"{path}: header length {n} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8:8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: header is not valid JSON ({e})") from None
    if not isinstance(header, dict):
        raise ContainerError(f"{path}: header must be a JSON object")
    payload = memoryview(blob)[8 + n:]
    meta = header.pop(META_KEY, {})
    out = {}
    for name, entry in header.items():
        try:
            dt = entry["dtype"]
            shape = tuple(int(d) for d in entry["shape"])
            off, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError):
            raise ContainerError(f"{path}: bad header entry for {name!r}") from None
        if dt not in DTYPES:
            raise ContainerError(f"{path}: tensor {name!r} has unsupported dtype {dt!r} (want f32 or f16)")
        want = int(np.prod(shape)) * DTYPES[dt].itemsize
        if length != want or off < 0 or off + length > len(payload):
            raise ContainerError(f"{path}: tensor {name!r} byte range [{off}, {off + length}) is inconsistent")
        arr = np.frombuffer(payload[off:off + length], dtype=DTYPES[dt]).reshape(shape)
        out[name] = arr.astype(np.float32)
    return out, meta
