"""Versioned binary checkpoint container.

Layout: an 8-byte magic, a uint32 format version, a uint64 length-prefixed
UTF-8 JSON header (model config, metadata, array directory), then each
array's raw bytes in directory order.  Floats are little-endian float64 and
the array bytes are written verbatim, so a save/load round trip is bit-exact.
No timestamps or other ambient state are recorded: identical inputs produce
identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig
from .tensor import Tensor

__all__ = ["Checkpoint", "CheckpointFormatError", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"MOELABCK"
_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CheckpointFormatError(ValueError):
    """Raised when a file is not a readable checkpoint."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _as_array(value) -> np.ndarray:
    data = value.data if isinstance(value, Tensor) else value
    arr = np.asarray(data)
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype="<f8")
    if arr.dtype.kind in "iu":
        return np.ascontiguousarray(arr, dtype="<i8")
    raise CheckpointFormatError(f"unsupported array dtype {arr.dtype}")


def save_checkpoint(
    path: str | Path,
    config: ModelConfig,
    params: Mapping[str, "Tensor | np.ndarray"],
    opt_arrays: Mapping[str, np.ndarray] | None = None,
    meta: Mapping | None = None,
) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name in sorted(params):
        arrays.append((f"param/{name}", _as_array(params[name])))
    for name in sorted(opt_arrays or {}):
        arrays.append((f"opt/{name}", _as_array((opt_arrays or {})[name])))

    header = {
        "config": asdict(config),
        "meta": dict(meta or {}),
        "arrays": [
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str}
            for name, arr in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        opt_arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dtype = _DTYPES.get(entry["dtype"])
            if dtype is None:
                raise CheckpointFormatError(f"unsupported dtype {entry['dtype']}")
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointFormatError(f"truncated array {entry['name']}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            name = entry["name"]
            if name.startswith("param/"):
                params[name[len("param/") :]] = arr
            elif name.startswith("opt/"):
                opt_arrays[name[len("opt/") :]] = arr
            else:
                raise CheckpointFormatError(f"unknown array namespace in {name!r}")
    config = ModelConfig(**header["config"])
    return Checkpoint(config=config, params=params, opt_arrays=opt_arrays, meta=header["meta"])
