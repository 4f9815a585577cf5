"""Flat binary tensor container with a JSON manifest.

Layout: magic ``PPCK`` | uint64 little-endian manifest length | manifest JSON |
raw tensor payload. Tensors are stored as little-endian float32; the manifest
records (name, shape, dtype, byte offset into the payload) plus a free-form
config dict.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"PPCK"
DTYPE = "<f4"


def save_checkpoint(path, tensors: Dict[str, np.ndarray], config: dict) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float32))
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": DTYPE, "offset": len(payload)}
        )
        payload.extend(arr.astype(DTYPE).tobytes())
    manifest = json.dumps({"version": 1, "config": config, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        f.write(payload)


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", data[4:12])
    manifest = json.loads(data[12 : 12 + n].decode("utf-8"))
    payload = data[12 + n :]
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype=e["dtype"], count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, manifest["config"]
