"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"LFCKPT01"
    header_len   uint64
    header       header_len bytes of UTF-8 JSON
    payload      concatenated '<f8' arrays in header order

The header holds caller metadata (``encoder_config`` and friends) plus a
``tensors`` list of ``{"name", "shape", "offset"}`` records, where ``offset``
counts bytes from the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"LFCKPT01"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    header = dict(header or {})
    records, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        records.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header["format"] = "layerfuse-checkpoint"
    header["version"] = 1
    header["tensors"] = records
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractError(f"{path}: not a layerfuse checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise ContractError(f"{path}: truncated header")
    header = json.loads(data[16:16 + n].decode("utf-8"))
    payload = memoryview(data)[16 + n:]
    tensors = {}
    for rec in header["tensors"]:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        start = rec["offset"]
        if start + 8 * count > len(payload):
            raise ContractError(f"{path}: truncated payload for tensor {rec['name']!r}")
        arr = np.frombuffer(payload[start:start + 8 * count], dtype="<f8")
        tensors[rec["name"]] = arr.astype(np.float64).reshape(rec["shape"])
    return header, tensors
