"""Deterministic checkpoint archives.

An archive is a zip file holding a magic marker, ``meta.json`` and one
``.npy`` member per tensor.  Member order, timestamps and JSON formatting
are fixed so that saving identical state twice yields identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

MAGIC = "UNICOAL-CKPT-1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    info.create_system = 3
    return info


def save_archive(path, meta: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_member("MAGIC"), MAGIC)
        zf.writestr(_member("meta.json"), json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(tensors):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(tensors[name]), allow_pickle=False)
            zf.writestr(_member(f"tensors/{name}.npy"), buf.getvalue())
    tmp.replace(path)
    return path


def load_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            if zf.read("MAGIC").decode() != MAGIC:
                raise CheckpointError(f"{path} is not a checkpoint archive")
            meta = json.loads(zf.read("meta.json"))
            tensors = {}
            for name in zf.namelist():
                if name.startswith("tensors/") and name.endswith(".npy"):
                    tensors[name[len("tensors/"):-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return meta, tensors
