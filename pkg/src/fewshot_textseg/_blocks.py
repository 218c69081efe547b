"""Raw little-endian float32 blocks plus a JSON metadata file."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError

META_NAME = "meta.json"


def write_block(path: Path, array) -> dict:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    arr.tofile(path)
    return {"file": path.name, "shape": list(arr.shape)}


def read_block(directory: Path, entry: dict) -> np.ndarray:
    path = Path(directory) / entry["file"]
    if not path.exists():
        raise DataError(f"missing block file {path}")
    data = np.fromfile(path, dtype="<f4")
    shape = tuple(entry["shape"])
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise DataError(f"block {path} holds {data.size} values, expected shape {shape}")
    return data.reshape(shape).astype(np.float64)


def write_meta(directory: Path, meta: dict) -> Path:
    path = Path(directory) / META_NAME
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_meta(directory: Path) -> dict:
    path = Path(directory) / META_NAME
    if not path.exists():
        raise DataError(f"no {META_NAME} in {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


def directory_digest(directory: Path) -> str:
    """sha256 over every file in a directory, in sorted name order."""
    h = hashlib.sha256()
    for path in sorted(Path(directory).rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(directory)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()
