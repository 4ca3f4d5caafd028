"""Seed substreams, parameter checksums, and JSON-lines helpers."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

__all__ = ["substream", "substream_seed", "params_checksum", "read_jsonl", "write_jsonl"]


def substream_seed(seed: int, name: str) -> int:
    """Stable derived seed for a named component (model/data/eval/...)."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


def params_checksum(params: Mapping[str, "np.ndarray | object"]) -> str:
    """SHA-256 over parameter names, shapes and raw little-endian bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        data = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.astype("<f8").tobytes())
    return h.hexdigest()


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | Path, records: Iterable[Mapping]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(dict(rec), ensure_ascii=False) + "\n")
            count += 1
    return count
