"""Flat binary checkpoint format for named tensors.

Layout: 8-byte little-endian header length, a UTF-8 JSON index
``[{"name", "dtype", "shape", "offset", "nbytes"}, ...]``, then the raw
little-endian tensor bytes back to back. Deterministic: tensors are written
in sorted name order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PKT1"


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        le = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"),
                                             copy=False))
        raw = le.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.replace(">", "<"),
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(index).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        index = json.loads(f.read(header_len).decode("utf-8"))
        blob = f.read()
    tensors = {}
    for entry in index:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors
