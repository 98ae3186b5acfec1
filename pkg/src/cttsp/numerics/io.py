"""Flat little-endian float64 blob plus a JSON index.

``<stem>.bin`` holds every array back to back; ``<stem>.json`` maps each
name to its shape and element offset and carries free-form metadata.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "f8-le-v1"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_arrays(stem: Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    stem = Path(stem)
    index: dict[str, dict] = {}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        index[name] = {"shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.size
    atomic_write_bytes(stem.with_suffix(".bin"), b"".join(chunks))
    doc = {"format": FORMAT, "size": offset, "tensors": index, "meta": dict(meta or {})}
    atomic_write_text(stem.with_suffix(".json"), json.dumps(doc, indent=1, sort_keys=True))


def load_arrays(stem: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    stem = Path(stem)
    index_path = stem.with_suffix(".json")
    if not index_path.exists():
        raise FileNotFoundError(f"missing checkpoint index {index_path}")
    doc = json.loads(index_path.read_text())
    if doc.get("format") != FORMAT:
        raise ValueError(f"{index_path}: unsupported format {doc.get('format')!r}")
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    if blob.size != doc["size"]:
        raise ValueError(f"{stem}.bin: expected {doc['size']} values, found {blob.size}")
    arrays = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arrays[name] = blob[start:start + count].reshape(shape).astype(np.float64)
    return arrays, doc["meta"]
