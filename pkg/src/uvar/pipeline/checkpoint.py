"""Single-file checkpoints: a JSON header plus raw little-endian array blobs.

Layout::

    MAGIC (8 bytes) | version (u32) | header length (u64) | header JSON | blobs | sha256 (32 bytes)

The header is written with sorted keys and lists every array's name, dtype,
shape and byte offset, so re-saving a loaded checkpoint reproduces the file
byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"UVARCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)  # JSON-serialisable state
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.arrays):
            a = np.asarray(self.arrays[name])
            if a.dtype.byteorder == ">":
                a = a.astype(a.dtype.newbyteorder("<"))
            raw = np.ascontiguousarray(a).tobytes()
            entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps({"meta": self.meta, "arrays": entries}, sort_keys=True,
                            separators=(",", ":"), allow_nan=False).encode()
        body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREFIX.size:
            raise CheckpointError(f"checkpoint truncated: {len(data)} bytes is shorter than the fixed prefix")
        magic, version, hlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version} is not supported (this build reads {FORMAT_VERSION})")
        start = _PREFIX.size
        if len(data) < start + hlen + 32:
            raise CheckpointError("checkpoint truncated inside the header")
        try:
            header = json.loads(data[start:start + hlen].decode())
            entries = header["arrays"]
            meta = header["meta"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from None
        base = start + hlen
        end = base + sum(int(e["nbytes"]) for e in entries)
        if len(data) < end + 32:
            raise CheckpointError(f"checkpoint truncated: expected {end + 32} bytes, found {len(data)}")
        if len(data) > end + 32:
            raise CheckpointError("trailing bytes after checkpoint")
        if hashlib.sha256(data[:end]).digest() != data[end:end + 32]:
            raise CheckpointError("checkpoint checksum mismatch")
        arrays = {}
        for e in entries:
            lo = base + int(e["offset"])
            a = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                              offset=lo)
            arrays[e["name"]] = a.reshape(e["shape"]).copy()
        return cls(meta, arrays)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return Checkpoint.from_bytes(path.read_bytes())
