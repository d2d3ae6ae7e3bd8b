"""Training checkpoints: one JSON header plus named raw float blobs.

Layout: magic ``MCKP``, version u8, u32 header length, UTF-8 JSON
header, then each array's little-endian row-major payload concatenated
in header order.  The header carries arbitrary JSON metadata (configs,
counters, RNG states, a config hash) and the array directory
(name/shape/dtype), so a resumed run restores every buffer bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"MCKP"
_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def config_hash(obj) -> str:
    """Stable short hash of any JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    directory = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = arr.dtype.newbyteorder("<").str[1:]  # e.g. 'f4'
        code = "<" + code
        if code not in _DTYPES:
            raise ValueError(f"array '{name}' has unsupported dtype {arr.dtype}")
        directory.append({"name": name, "shape": list(arr.shape), "dtype": code})
        payloads.append(np.ascontiguousarray(arr).astype(code).tobytes())
    header = json.dumps({"meta": meta, "arrays": directory}).encode()
    out = bytearray()
    out += _MAGIC + struct.pack("<BI", _VERSION, len(header)) + header
    for p in payloads:
        out += p
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < 9 or blob[:4] != _MAGIC:
        raise ValueError(f"bad magic in {path}: not a checkpoint")
    version, hlen = struct.unpack_from("<BI", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unknown checkpoint version {version}")
    if len(blob) < 9 + hlen:
        raise ValueError(f"truncated header in {path}")
    header = json.loads(blob[9:9 + hlen].decode())
    arrays: dict[str, np.ndarray] = {}
    off = 9 + hlen
    for ent in header["arrays"]:
        dtype = _DTYPES[ent["dtype"]]
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        nbytes = count * dtype.itemsize
        if len(blob) < off + nbytes:
            raise ValueError(f"truncated payload for array '{ent['name']}'")
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dtype)
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
        off += nbytes
    if off != len(blob):
        raise ValueError(f"trailing bytes after payload in {path}")
    return header["meta"], arrays
