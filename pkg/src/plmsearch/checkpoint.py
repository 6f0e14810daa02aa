"""ATBT checkpoint files.

Layout::

    b"ATBT" | u32 version | u32 header length | header (UTF-8 JSON) | payload

The header carries free-form metadata, a tensor directory (name, shape,
byte offset, byte length) and the SHA-256 of the payload. The payload is the
tensors as little-endian float32, concatenated in directory order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"ATBT"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": VERSION,
        "meta": dict(meta or {}),
        "tensors": directory,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("not an ATBT checkpoint (bad magic bytes)")
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, head_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = data[12 + head_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload hash mismatch")
    tensors = {}
    for entry in header["tensors"]:
        start, length = entry["offset"], entry["length"]
        raw = payload[start:start + length]
        if len(raw) != length:
            raise CheckpointError(f"tensor {entry['name']} truncated")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, header


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write a checkpoint; returns the SHA-256 of the file bytes."""
    data = dumps(tensors, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensors_sha256(tensors: Mapping[str, np.ndarray]) -> str:
    """Hash of tensor names, shapes and float32 bytes, independent of any file."""
    h = hashlib.sha256()
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
