"""Manifest + raw-matrix container used for model weights.

Layout: a magic line, one JSON manifest line (architecture descriptor and
the declared arrays), the arrays as little-endian C-order bytes in declared
order, then a 32-byte SHA-256 trailer over everything before it.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"PKTIDS-MATRICES 1\n"


class ChecksumMismatch(ValueError):
    pass


class ArchMismatch(ValueError):
    pass


def write_container(path, arch: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs = [], []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape)})
        blobs.append(le.tobytes())
    header = json.dumps({"arch": arch, "arrays": entries}, sort_keys=True).encode() + b"\n"
    body = MAGIC + header + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    body, digest = data[:-32], data[-32:]
    if len(data) < len(MAGIC) + 32 or hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    if not body.startswith(MAGIC):
        raise ValueError(f"{path}: not a matrix container")
    nl = body.index(b"\n", len(MAGIC))
    manifest = json.loads(body[len(MAGIC):nl])
    off = nl + 1
    arrays = {}
    for e in manifest["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dt, count=count, offset=off).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="))
        off += count * dt.itemsize
    if off != len(body):
        raise ValueError(f"{path}: trailing bytes after declared arrays")
    return manifest["arch"], arrays


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
