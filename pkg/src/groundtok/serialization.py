"""Binary token container and deterministic JSON writing.

Container layout (little-endian):

    8 bytes   magic ``TOKBIN01``
    uint32    number of dimensions D
    D uint64  dimension sizes
    uint32    generator-id byte length G
    G bytes   generator id, UTF-8
    payload   row-major IEEE-754 float64 values, prod(dims) of them

The generator id records which pseudo-random generator produced the
numbers (see :mod:`groundtok.rng`), so artifacts are self-describing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .rng import GENERATOR_ID

MAGIC = b"TOKBIN01"


def write_tokens(path: str | Path, array: np.ndarray, generator: str = GENERATOR_ID) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    gen = generator.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<I", len(gen)))
        fh.write(gen)
        fh.write(arr.astype("<f8", copy=False).tobytes())


def read_tokens(path: str | Path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"bad magic in {path!s}: {magic!r}")
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        (gen_len,) = struct.unpack("<I", fh.read(4))
        generator = fh.read(gen_len).decode("utf-8")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(fh.read(8 * count), dtype="<f8", count=count)
    return data.reshape(dims).copy(), generator


def tokens_debug_json(array: np.ndarray, generator: str = GENERATOR_ID) -> dict[str, Any]:
    """Human-readable JSON form of a token container."""
    arr = np.asarray(array, dtype=np.float64)
    return {"dims": list(arr.shape), "generator": generator, "data": arr.tolist()}


def dump_json(obj: Any, path: str | Path, indent: int | None = 2) -> None:
    """Write JSON with sorted keys so re-runs are byte-identical."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=indent)
        fh.write("\n")


def dump_jsonl(rows: list[Any], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_jsonl(path: str | Path) -> list[Any]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path!s}:{lineno}: invalid JSON: {exc}") from exc
    return rows
