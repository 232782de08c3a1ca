"""Deterministic ZIP-of-NPY containers shared by samples and checkpoints.

Members are stored uncompressed with a fixed timestamp, so equal arrays
always produce equal bytes. The result is also readable by ``numpy.load``.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from typing import Any, Mapping

import numpy as np

from .errors import CorruptArchive

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def npy_bytes(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def write_archive(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    """Write ``arrays`` as ``<name>.npy`` members, plus ``manifest.json`` if ``meta`` is given."""
    tmp = f"{os.fspath(path)}.tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        if meta is not None:
            zf.writestr(_member("manifest.json"), json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, arr in arrays.items():
            zf.writestr(_member(f"{name}.npy"), npy_bytes(arr))
    os.replace(tmp, path)


def read_archive(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any] | None]:
    arrays: dict[str, np.ndarray] = {}
    meta = None
    try:
        with zipfile.ZipFile(path) as zf:
            for name in zf.namelist():
                raw = zf.read(name)
                if name == "manifest.json":
                    meta = json.loads(raw)
                elif name.endswith(".npy"):
                    buf = io.BytesIO(raw)
                    arrays[name[:-4]] = np.lib.format.read_array(buf, allow_pickle=False)
                    if buf.tell() != len(raw):
                        raise CorruptArchive(f"{path}: trailing bytes in member {name}")
    except (zipfile.BadZipFile, ValueError, EOFError, json.JSONDecodeError, zipfile.LargeZipFile) as exc:
        raise CorruptArchive(f"{path}: {exc}") from exc
    return arrays, meta
