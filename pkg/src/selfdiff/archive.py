"""Versioned named-array archive with byte-deterministic serialization.

A checkpoint (or feature cache) is a single uncompressed zip holding one
``meta.json`` document plus one ``.npy`` entry per named array. Entries are
written in sorted order with fixed timestamps, so saving identical content
twice produces identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    meta.setdefault("format_version", FORMAT_VERSION)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())
    tmp.replace(path)  # atomic publish


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json").decode("utf-8"))
        for entry in zf.namelist():
            if entry.startswith("arrays/") and entry.endswith(".npy"):
                name = entry[len("arrays/") : -len(".npy")]
                arrays[name] = np.load(io.BytesIO(zf.read(entry)), allow_pickle=False)
    return arrays, meta
