"""PISRTEN1 binary tensor files.

Layout: 8-byte magic ``PISRTEN1``, dtype byte (0 = f32, 1 = f64), rank byte,
6 zero bytes, ``rank`` little-endian u64 dims, then the row-major
little-endian payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PISRTEN1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFormatError(ValueError):
    pass


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BB6x", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise TensorFormatError("bad magic")
    code, rank = struct.unpack_from("<BB", buf, 8)
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if len(buf) < 16 + 8 * rank:
        raise TensorFormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 16)
    dtype = _DTYPES[code]
    start = 16 + 8 * rank
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - start < need:
        raise TensorFormatError(f"truncated payload: need {need} bytes, have {len(buf) - start}")
    if len(buf) - start > need:
        raise TensorFormatError("trailing bytes after payload")
    return np.frombuffer(buf, dtype=dtype, count=need // dtype.itemsize, offset=start).reshape(shape).astype(dtype.newbyteorder("="))


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_named(directory, tensors: dict[str, np.ndarray], extra: dict[str, str] | None = None) -> None:
    """Write a manifest plus one tensor file per name, atomically (temp dir then rename)."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        _rmtree(tmp)
    tmp.mkdir(parents=True)
    lines = [f"{k}={v}" for k, v in (extra or {}).items()]
    for name, arr in tensors.items():
        fname = name + ".t"
        save(tmp / fname, arr)
        lines.append(f"tensor.{name}={fname}")
    (tmp / "manifest.txt").write_text("\n".join(lines) + "\n")
    if directory.exists():
        _rmtree(directory)
    os.replace(tmp, directory)


def load_named(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.txt")
    tensors = {}
    extra = {}
    for k, v in manifest.items():
        if k.startswith("tensor."):
            tensors[k[len("tensor."):]] = load(directory / v)
        else:
            extra[k] = v
    return tensors, extra


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _rmtree(path: Path) -> None:
    for child in path.iterdir():
        if child.is_dir():
            _rmtree(child)
        else:
            child.unlink()
    path.rmdir()
