"""Checkpoint archive: JSON manifest plus one raw little-endian blob per tensor.

Layout of a checkpoint directory:

    manifest.json   {"format_version": 1, "tensors": [{name, shape, dtype,
                     file}, ...], ...caller metadata...}
    t0000.bin       raw float bytes, little-endian, C order
    ...

Writes are atomic: everything lands in a temp directory first, which then
replaces the target in one rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil

import numpy as np

from .errors import FormatError
from .numerics import Tensor

FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def save_checkpoint(directory, tensors: dict, metadata: dict | None = None) -> None:
    directory = str(directory)
    tmp = directory + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    entries = []
    for i, name in enumerate(sorted(tensors)):
        data = _as_array(tensors[name])
        dtype = "float64" if data.dtype == np.float64 else "float32"
        fname = f"t{i:04d}.bin"
        with open(os.path.join(tmp, fname), "wb") as fh:
            fh.write(np.ascontiguousarray(data).astype(_DTYPES[dtype]).tobytes())
        entries.append({"name": name, "shape": list(data.shape),
                        "dtype": dtype, "file": fname})
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries}
    if metadata:
        overlap = set(metadata) & set(manifest)
        if overlap:
            raise FormatError(f"metadata may not override {sorted(overlap)}")
        manifest.update(metadata)
    with open(os.path.join(tmp, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if os.path.exists(directory):
        shutil.rmtree(directory)
    os.replace(tmp, directory)


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    path = os.path.join(str(directory), "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{directory}: not a checkpoint (no manifest.json)")
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON: {err}") from err
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{path}: unrecognized format version {manifest.get('format_version')!r}")
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype {dtype!r}")
        blob_path = os.path.join(str(directory), entry["file"])
        raw = np.fromfile(blob_path, dtype=_DTYPES[dtype])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if raw.size != expected:
            raise FormatError(
                f"{path}: blob {entry['file']} holds {raw.size} values, "
                f"manifest shape {entry['shape']} needs {expected}")
        tensors[entry["name"]] = raw.reshape(entry["shape"]).astype(dtype)
    return tensors, manifest


def checksum_tensors(tensors: dict) -> str:
    """Order-independent SHA-256 over tensor names and bytes."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        data = _as_array(tensors[name])
        digest.update(name.encode())
        digest.update(str(data.shape).encode())
        digest.update(np.ascontiguousarray(data).tobytes())
    return digest.hexdigest()
