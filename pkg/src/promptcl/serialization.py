"""Hashed binary container for named arrays plus JSON metadata.

Layout (all integers little-endian)::

    magic      8 bytes   b"PCLCKPT\\x00"
    version    uint32    FORMAT_VERSION
    hdr_len    uint64    length of the header that follows
    header     hdr_len   UTF-8 JSON, keys sorted:
                         {"kind", "meta", "arrays": [{"name", "dtype", "shape",
                          "offset", "nbytes"}, ...], "sha256"}
    payload    ...       raw C-order array bytes, concatenated in header order

``sha256`` covers the canonical JSON of ``kind``/``meta``/``arrays`` followed by
the payload, so any flipped byte is detected on load. Output is a pure function
of the inputs: saving the same content twice yields identical files.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"PCLCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _entries(arrays: Dict[str, np.ndarray]):
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def content_hash(kind: str, meta: dict, arrays: Dict[str, np.ndarray]) -> str:
    entries, payload = _entries(arrays)
    return _digest(kind, meta, entries, payload)


def _digest(kind, meta, entries, payload) -> str:
    h = hashlib.sha256()
    h.update(canonical_json({"kind": kind, "meta": meta, "arrays": entries}).encode())
    h.update(payload)
    return h.hexdigest()


def dumps(kind: str, meta: dict, arrays: Dict[str, np.ndarray]) -> bytes:
    entries, payload = _entries(arrays)
    header = {"kind": kind, "meta": meta, "arrays": entries,
              "sha256": _digest(kind, meta, entries, payload)}
    hdr = canonical_json(header).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hdr)) + hdr + payload


def loads(blob: bytes, kind: str | None = None) -> Tuple[dict, Dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a promptcl checkpoint (bad magic)")
    version, hdr_len = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(blob[20:20 + hdr_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    payload = blob[20 + hdr_len:]
    digest = _digest(header["kind"], header["meta"], header["arrays"], payload)
    if digest != header["sha256"]:
        raise CheckpointError("checkpoint content hash mismatch (corrupt file)")
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, found {header['kind']!r}")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


def save(path, kind: str, meta: dict, arrays: Dict[str, np.ndarray]) -> str:
    """Atomically write a checkpoint; returns its content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = dumps(kind, meta, arrays)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return json.loads(blob[20:20 + struct.unpack("<IQ", blob[8:20])[1]])["sha256"]


def load(path, kind: str | None = None) -> Tuple[dict, Dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), kind)
