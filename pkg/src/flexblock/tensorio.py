"""Self-describing tensor files.

Binary layout (little-endian)::

    magic   4 bytes  b"FBTN"
    version u8       1
    dtype   u8       1 = float64
    ndim    u16
    dims    ndim x u64
    payload prod(dims) x float64, row-major

Text files (``.txt``/``.csv``/``.tsv``) hold whitespace- or comma-separated
numbers; an optional first line ``# shape: 2 3 4`` sets the shape.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FBTN"
VERSION = 1
_FLOAT64 = 1

__all__ = ["read_tensor", "write_tensor", "TensorFileError"]


class TensorFileError(ValueError):
    pass


def write_tensor(path, array) -> None:
    a = np.asarray(array, dtype="<f8")  # tobytes() is row-major; keeps 0-d shape
    header = MAGIC + struct.pack("<BBH", VERSION, _FLOAT64, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def _read_binary(data: bytes, name: str) -> np.ndarray:
    if len(data) < 8:
        raise TensorFileError(f"{name}: truncated header")
    version, dtype, ndim = struct.unpack_from("<BBH", data, 4)
    if version != VERSION or dtype != _FLOAT64:
        raise TensorFileError(f"{name}: unsupported version {version} / dtype code {dtype}")
    off = 8 + 8 * ndim
    if len(data) < off:
        raise TensorFileError(f"{name}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", data, 8)
    count = math.prod(dims)
    if len(data) != off + 8 * count:
        raise TensorFileError(f"{name}: payload holds {(len(data) - off) / 8:g} values, dims need {count}")
    return np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)


def _read_text(text: str, name: str) -> np.ndarray:
    shape = None
    values = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("#"):
            if stripped[1:].strip().startswith("shape:"):
                try:
                    shape = tuple(int(t) for t in stripped.split(":", 1)[1].split())
                except ValueError:
                    raise TensorFileError(f"{name}:{lineno}: bad shape line") from None
            continue
        for tok in stripped.replace(",", " ").split():
            try:
                values.append(float(tok))
            except ValueError:
                raise TensorFileError(f"{name}:{lineno}: not a number: {tok!r}") from None
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        if math.prod(shape) != arr.size:
            raise TensorFileError(f"{name}: shape {shape} needs {math.prod(shape)} values, found {arr.size}")
        arr = arr.reshape(shape)
    return arr


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise TensorFileError(f"{path}: {exc.strerror}") from exc
    if data[:4] == MAGIC:
        return _read_binary(data, str(path))
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise TensorFileError(f"{path}: neither a tensor file nor UTF-8 text") from None
    return _read_text(text, str(path))
