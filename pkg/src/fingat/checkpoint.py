"""Parameter checkpoints.

Layout::

    8 bytes   magic  b"FGATCKP1"
    8 bytes   little-endian uint64: length of the JSON index
    N bytes   UTF-8 JSON index {"version", "meta", "params": [...], "sha256"}
    payload   concatenated little-endian float64 arrays, row-major

Each ``params`` entry is ``{"name", "shape", "offset", "nbytes"}`` with the
offset relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FGATCKP1"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    chunks, entries, offset = [], [], 0
    for name, value in params.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    index = {"version": VERSION, "meta": meta or {}, "params": entries,
             "sha256": hashlib.sha256(payload).hexdigest()}
    blob = json.dumps(index, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(params, meta)``; raises :class:`CheckpointError` on any corruption."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        index = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt index") from None
    if index.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {index.get('version')}")
    payload = data[16 + n:]
    if hashlib.sha256(payload).hexdigest() != index.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    params = {}
    for e in index["params"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated parameter {e['name']}")
        params[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return params, index.get("meta", {})
