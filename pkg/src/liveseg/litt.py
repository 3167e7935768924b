"""LITT tensor files and named-tensor bundle directories.

File layout: magic ``LITT``, version u16, ndim u16, dims u32 little-endian,
payload f32 little-endian row-major. A bundle is a directory of LITT files
plus ``manifest.json`` mapping tensor names to files, with per-file sha256,
the producing config hash and seed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LITT"
VERSION = 1


class LittError(ValueError):
    """Malformed or truncated LITT data."""


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    """Load a LITT file as float32 (the payload's native width)."""
    raw = Path(path).read_bytes()
    return _decode(raw, str(path))


def _decode(raw: bytes, name: str) -> np.ndarray:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise LittError(f"{name}: not a LITT file")
    version, ndim = struct.unpack_from("<HH", raw, 4)
    if version != VERSION:
        raise LittError(f"{name}: unsupported LITT version {version}")
    dims_end = 8 + 4 * ndim
    if len(raw) < dims_end:
        raise LittError(f"{name}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    count = int(np.prod(dims)) if ndim else 1
    payload = raw[dims_end:]
    if len(payload) != 4 * count:
        raise LittError(f"{name}: payload holds {len(payload) // 4} floats, "
                        f"dims {dims} need {count}")
    flat = np.frombuffer(payload, dtype="<f4", count=count)
    return flat.astype(np.float32).reshape(dims)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_bundle(directory: str | Path, tensors: dict[str, np.ndarray],
                meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        fname = f"{name}.litt"
        save_tensor(directory / fname, arr)
        entries[name] = {
            "file": fname,
            "shape": list(np.asarray(arr).shape),
            "sha256": _sha256(directory / fname),
        }
    manifest = {"format": "litt-bundle", "version": VERSION, "tensors": entries}
    manifest.update(meta or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_bundle(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load all tensors of a bundle, verifying the recorded hashes."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise LittError(f"{directory}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    tensors = {}
    for name, entry in manifest["tensors"].items():
        fpath = directory / entry["file"]
        if not fpath.exists():
            raise LittError(f"{directory}: missing tensor file {entry['file']}")
        if _sha256(fpath) != entry["sha256"]:
            raise LittError(f"{directory}: hash mismatch for {entry['file']}")
        tensors[name] = load_tensor(fpath)
    return tensors, manifest
