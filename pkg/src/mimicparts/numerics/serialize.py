"""Binary tensor payloads ("MPT1") and the JSON-header container used for
clips, feature files and checkpoints.

Tensor payload, little-endian::

    b"MPT1" | u8 dtype code | u8 rank | rank x u64 extents | row-major data

Container::

    b"MPC1" | u64 header length | UTF-8 JSON header | payload* (count in header["n_tensors"])
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

TENSOR_MAGIC = b"MPT1"
CONTAINER_MAGIC = b"MPC1"

DTYPE_CODES = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<u2"),
    3: np.dtype("<i8"),
}
_CODE_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("=")
    if key not in _CODE_OF:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return _CODE_OF[key]


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(getattr(arr, "data", arr))
    code = _code_for(arr)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated payload: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    dt = DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="))


def tensor_to_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    fh = io.BytesIO(raw)
    arr = read_tensor(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return arr


def write_container(path: str | Path, header: dict, tensors: Sequence[np.ndarray]) -> None:
    header = dict(header, n_tensors=len(tensors))
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for t in tensors:
            write_tensor(fh, t)
    tmp.replace(path)


def read_container(path: str | Path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CONTAINER_MAGIC:
            raise FormatError(f"{path}: bad container magic {magic!r}")
        (n,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            header = json.loads(_read_exact(fh, n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt header") from exc
        tensors = [read_tensor(fh) for _ in range(int(header.get("n_tensors", 0)))]
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return header, tensors


def save_named(path: str | Path, header: dict, named: dict[str, np.ndarray]) -> None:
    names = list(named)
    write_container(path, dict(header, tensor_names=names), [named[k] for k in names])


def load_named(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    header, tensors = read_container(path)
    names = header.get("tensor_names")
    if names is None or len(names) != len(tensors):
        raise FormatError(f"{path}: tensor names missing or inconsistent")
    return header, dict(zip(names, tensors))
