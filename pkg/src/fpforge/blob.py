"""Self-verifying checkpoint files.

Layout::

    b"FPFORGE1" | uint64 little-endian header length | JSON header | raw tensor bytes

The header lists every tensor (name, dtype, shape, offset) plus a free-form
``meta`` dict and the SHA-256 content id.  The id covers the canonical JSON of
kind/meta/tensor table and the tensor bytes, so it is stable across machines
and independent of write order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint

MAGIC = b"FPFORGE1"


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def content_id(kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> str:
    table, _ = _layout(tensors)
    h = hashlib.sha256()
    h.update(_canonical({"kind": kind, "meta": meta, "tensors": table}))
    for name in sorted(tensors):
        h.update(np.ascontiguousarray(tensors[name]).tobytes())
    return h.hexdigest()


def _layout(tensors):
    table, offset = [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    return table, offset


def write(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> str:
    cid = content_id(kind, meta, tensors)
    table, _ = _layout(tensors)
    header = _canonical({"kind": kind, "meta": meta, "tensors": table, "content_id": cid})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in sorted(tensors):
            f.write(np.ascontiguousarray(tensors[name]).tobytes())
    tmp.replace(path)
    return cid


def read(path, expect_kind: str | None = None):
    """Return ``(kind, meta, tensors, content_id)``; raise CorruptCheckpoint on any mismatch."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 8:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start : start + hlen])
    except ValueError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    body = memoryview(data)[start + hlen :]
    tensors = {}
    try:
        for t in header["tensors"]:
            dtype = np.dtype(t["dtype"])
            count = int(np.prod(t["shape"], dtype=np.int64))
            nbytes = count * dtype.itemsize
            if t["offset"] + nbytes > len(body):
                raise CorruptCheckpoint(f"{path}: truncated tensor {t['name']}")
            arr = np.frombuffer(body[t["offset"] : t["offset"] + nbytes], dtype=dtype).reshape(t["shape"])
            tensors[t["name"]] = arr.copy()
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed tensor table") from exc
    kind, meta = header.get("kind"), header.get("meta", {})
    cid = content_id(kind, meta, tensors)
    if cid != header.get("content_id"):
        raise CorruptCheckpoint(f"{path}: content hash mismatch")
    if expect_kind is not None and kind != expect_kind:
        raise CorruptCheckpoint(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    return kind, meta, tensors, cid
