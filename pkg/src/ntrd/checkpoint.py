"""Versioned binary checkpoint container.

Layout: magic ``NTRD``, u32 format version, u64 header length, header JSON
(canonical key order), u32 tensor count, then length-prefixed named tensors
(little-endian float32/float64, C order). Serialization is canonical, so
save -> load -> save reproduces the file bytewise. Writes go through a
temporary file and an atomic rename; a corrupt file fails to load without
mutating anything.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"NTRD"
FORMAT_VERSION = 1

_DTYPES = {0: np.float64, 1: np.float32}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def version(self) -> int:
        return self.header.get("format_version", FORMAT_VERSION)


def save_checkpoint(path: str | Path, header: dict,
                    tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            data = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} does not match "
                f"supported version {FORMAT_VERSION}")
        header_len = struct.unpack("<Q", _read_exact(fh, 8, "header length"))[0]
        try:
            header = json.loads(_read_exact(fh, header_len, "header"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        count = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))[0]
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2, "name length"))[0]
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            code = struct.unpack("<B", _read_exact(fh, 1, "dtype"))[0]
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for '{name}'")
            ndim = struct.unpack("<B", _read_exact(fh, 1, "rank"))[0]
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "dim"))[0]
                          for _ in range(ndim))
            nbytes = struct.unpack("<Q", _read_exact(fh, 8, "payload length"))[0]
            raw = _read_exact(fh, nbytes, f"tensor '{name}'")
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            arr = np.frombuffer(raw, dtype=dtype).astype(_DTYPES[code]).reshape(shape)
            tensors[name] = arr
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(header=header, tensors=tensors)
