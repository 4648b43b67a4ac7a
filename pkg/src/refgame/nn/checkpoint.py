"""Checkpoint persistence: a directory holding a JSON manifest plus one
binary blob per named tensor.

Blob layout, little-endian: u32 rank, u32 per dimension, then float32 data
row-major. Loading verifies the manifest before touching any blob and fails
loudly on architecture mismatch.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ParseError
from .autograd import Tensor

MANIFEST_NAME = "manifest.json"


def _blob_path(directory: Path, name: str) -> Path:
    return directory / (name.replace("/", "_") + ".bin")


def write_blob(path: Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.tobytes(order="C"))


def read_blob(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    (rank,) = struct.unpack_from("<I", raw, 0)
    shape = struct.unpack_from(f"<{rank}I", raw, 4)
    offset = 4 + 4 * rank
    data = np.frombuffer(raw, dtype="<f4", offset=offset)
    if data.size != int(np.prod(shape)):
        raise ParseError(f"blob {path} size does not match its shape header")
    return data.reshape(shape).copy()


def save_checkpoint(directory: str | Path, manifest: dict, params: dict[str, Tensor]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["tensors"] = {name: list(p.data.shape) for name, p in sorted(params.items())}
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for name, p in params.items():
        write_blob(_blob_path(directory, name), p.data)


def load_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_checkpoint(directory: str | Path, expected: dict | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Load manifest + blobs; `expected` keys must match the stored manifest
    exactly (architecture guard)."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    if expected:
        for key, value in expected.items():
            if manifest.get(key) != value:
                raise ConfigError(
                    f"checkpoint manifest mismatch on {key!r}: "
                    f"stored {manifest.get(key)!r}, expected {value!r}"
                )
    tensors = {}
    for name, shape in manifest["tensors"].items():
        array = read_blob(_blob_path(directory, name))
        if list(array.shape) != list(shape):
            raise ConfigError(f"tensor {name}: blob shape {array.shape} vs manifest {shape}")
        tensors[name] = array
    return manifest, tensors


def restore_params(params: dict[str, Tensor], tensors: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise ConfigError(f"checkpoint tensor names differ (missing={missing}, extra={extra})")
    for name, p in params.items():
        if tuple(tensors[name].shape) != p.data.shape:
            raise ConfigError(
                f"tensor {name}: checkpoint shape {tensors[name].shape} vs model {p.data.shape}"
            )
        p.data = tensors[name].astype(p.data.dtype)
