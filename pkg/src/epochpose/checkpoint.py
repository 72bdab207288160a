"""Shared checkpoint container: a zip holding ``meta.json`` plus one ``.npy`` per array.

Entries are written in sorted order with a fixed timestamp and no compression,
so saving the same content twice yields byte-identical files.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

FIXED_DATE = (1980, 1, 1, 0, 0, 0)
CONTAINER_VERSION = 1


class CheckpointError(ValueError):
    pass


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save(path, kind: str, meta: dict, arrays: dict) -> None:
    meta = {"container_version": CONTAINER_VERSION, "kind": kind, **meta}
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("meta.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_entry(f"arrays/{name}.npy"), buf.getvalue())


def load(path, kind: str | None = None) -> tuple[dict, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    try:
        with zipfile.ZipFile(p) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {}
            for name in zf.namelist():
                if name.startswith("arrays/") and name.endswith(".npy"):
                    key = name[len("arrays/"):-len(".npy")]
                    arrays[key] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                           allow_pickle=False)
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{p}: not a checkpoint ({e})") from None
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{p}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
    return meta, arrays


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
