"""Tensor bundles on disk: a JSON manifest plus one little-endian payload file."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MANIFEST = "manifest.json"
PAYLOAD = "payload.bin"
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def save_tensors(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float arrays to directory ``path``.

    The manifest lists ``name``, ``shape``, ``dtype``, byte ``offset`` and
    ``nbytes`` per tensor; the payload is their raw little-endian bytes
    concatenated in manifest order.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / PAYLOAD, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            code = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}.get(arr.dtype)
            if code is None:
                raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": code,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    doc = {"format": "attentivegru-tensors/1", "tensors": entries, "meta": meta or {}}
    (path / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    doc = json.loads((path / MANIFEST).read_text())
    payload = (path / PAYLOAD).read_bytes()
    out: dict[str, np.ndarray] = {}
    for e in doc["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.float32 if e["dtype"] == "f32" else np.float64)
    return out, doc.get("meta", {})
