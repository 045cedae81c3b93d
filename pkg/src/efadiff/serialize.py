"""Checkpoint persistence.

A tensor blob is an ASCII header line ``EFA-TENSOR v1 <name> <dtype> <rank>
<dims...>`` followed by the raw little-endian scalars. A checkpoint file is a
manifest (names, byte offsets, metadata) followed by the concatenated blobs;
offsets are relative to the first byte after the manifest's ``end`` line.
Round-trips are bit-exact, which the determinism suite relies on.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np

from .errors import ValidationError
from .tensor import Tensor

_MAGIC = "EFA-CHECKPOINT v1"
_BLOB_MAGIC = "EFA-TENSOR v1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _check_name(name: str) -> None:
    if not name or any(ch.isspace() for ch in name):
        raise ValidationError(f"tensor name must be non-empty and whitespace-free: {name!r}")


def tensor_blob(name: str, array: np.ndarray) -> bytes:
    _check_name(name)
    dtype = _DTYPE_NAMES.get(array.dtype)
    if dtype is None:
        raise ValidationError(f"unsupported checkpoint dtype {array.dtype} for {name!r}")
    dims = " ".join(str(d) for d in array.shape)
    header = f"{_BLOB_MAGIC} {name} {dtype} {array.ndim}{' ' + dims if dims else ''}\n"
    payload = np.ascontiguousarray(array).astype(_DTYPES[dtype], copy=False).tobytes()
    return header.encode("ascii") + payload


def read_tensor_blob(buf: io.BufferedIOBase) -> tuple[str, np.ndarray]:
    header = buf.readline().decode("ascii").rstrip("\n").split(" ")
    if header[:2] != _BLOB_MAGIC.split(" "):
        raise ValidationError(f"bad tensor blob header: {header}")
    name, dtype, rank = header[2], header[3], int(header[4])
    shape = tuple(int(d) for d in header[5 : 5 + rank])
    count = int(np.prod(shape)) if shape else 1
    raw = buf.read(count * _DTYPES[dtype].itemsize)
    arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
    return name, arr.astype(arr.dtype.newbyteorder("="))


def save_checkpoint(path, tensors: dict[str, np.ndarray | Tensor], meta: dict[str, str] | None = None) -> None:
    """Write named tensors plus flat string metadata to ``path``."""
    blobs: list[tuple[str, bytes]] = []
    for name in sorted(tensors):
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else tensors[name]
        blobs.append((name, tensor_blob(name, np.asarray(arr))))
    manifest = [_MAGIC]
    for key in sorted(meta or {}):
        value = str((meta or {})[key])
        if "\n" in value or " " in key:
            raise ValidationError(f"meta entries must be single-line with space-free keys: {key!r}")
        manifest.append(f"meta {key} {value}")
    offset = 0
    for name, blob in blobs:
        manifest.append(f"blob {name} {offset} {len(blob)}")
        offset += len(blob)
    manifest.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(manifest) + "\n").encode("utf-8"))
        for _, blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as f:
        first = f.readline().decode("utf-8").rstrip("\n")
        if first != _MAGIC:
            raise ValidationError(f"not a checkpoint file: {path}")
        meta: dict[str, str] = {}
        entries: list[tuple[str, int, int]] = []
        while True:
            line = f.readline().decode("utf-8").rstrip("\n")
            if line == "end":
                break
            if line.startswith("meta "):
                _, key, value = line.split(" ", 2)
                meta[key] = value
            elif line.startswith("blob "):
                _, name, off, size = line.split(" ")
                entries.append((name, int(off), int(size)))
            else:
                raise ValidationError(f"unexpected manifest line: {line!r}")
        base = f.tell()
        tensors: dict[str, np.ndarray] = {}
        for name, off, size in entries:
            f.seek(base + off)
            blob_name, arr = read_tensor_blob(f)
            if blob_name != name:
                raise ValidationError(f"manifest/blob name mismatch: {name!r} vs {blob_name!r}")
            tensors[name] = arr
    return tensors, meta


def parameter_digest(tensors: dict[str, np.ndarray | Tensor]) -> str:
    """Byte digest of parameter values, order-independent; used by freeze checks."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def architecture_hash(tensors: dict[str, np.ndarray | Tensor], extra: dict[str, str] | None = None) -> str:
    """Hash of parameter names/shapes/dtypes plus structural metadata (not values)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name])
        h.update(f"{name}|{arr.shape}|{arr.dtype}\n".encode())
    for key in sorted(extra or {}):
        h.update(f"{key}={extra[key]}\n".encode())
    return h.hexdigest()[:16]
