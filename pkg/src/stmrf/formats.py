"""Flat binary raster format and its date sidecar.

Layout of a ``.stmr`` file (all integers little-endian)::

    offset  size  field
    0       4     magic b"STMR"
    4       2     version (u16, currently 1)
    6       16    T, H, W, C (u32 each)
    22      2     dtype code (u16): 1 = f32, 2 = f64, 3 = u16
    24      40    zero padding up to a 64-byte header
    64      ...   row-major payload, shape (T, H, W, C), little-endian

Dates live next to the raster in ``<file>.dates``: one ISO-8601 date per
line, UTF-8, ``T`` lines.
"""

from __future__ import annotations

import datetime as dt
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"STMR"
VERSION = 1
HEADER_SIZE = 64
_HEADER = struct.Struct("<4sH4IH")

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u2")}
_CODE_FOR = {v.str: k for k, v in DTYPE_CODES.items()}


class RasterFormatError(ValueError):
    pass


def encode_raster(data: np.ndarray, dtype: str = "f8") -> bytes:
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise RasterFormatError(f"raster must be (T, H, W) or (T, H, W, C), got {arr.shape}")
    target = np.dtype(dtype).newbyteorder("<")
    if target.str not in _CODE_FOR:
        raise RasterFormatError(f"unsupported dtype {dtype!r}; use f4, f8 or u2")
    if target.kind == "u" and arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
        raise RasterFormatError("values out of range for u16")
    header = _HEADER.pack(MAGIC, VERSION, *arr.shape, _CODE_FOR[target.str])
    header = header.ljust(HEADER_SIZE, b"\0")
    return header + np.ascontiguousarray(arr, dtype=target).tobytes()


def decode_raster(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER_SIZE:
        raise RasterFormatError("truncated header")
    magic, version, t, h, w, c, code = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"unsupported version {version}")
    if code not in DTYPE_CODES:
        raise RasterFormatError(f"unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    n = t * h * w * c
    if len(buf) != HEADER_SIZE + n * dtype.itemsize:
        raise RasterFormatError(
            f"payload size {len(buf) - HEADER_SIZE} does not match shape {(t, h, w, c)}"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=HEADER_SIZE)
    return arr.reshape(t, h, w, c).astype(dtype.newbyteorder("="))


def dates_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".dates")


def write_raster(path, data, dtype: str = "f8", dates: Sequence[dt.date] | None = None) -> None:
    path = Path(path)
    payload = encode_raster(data, dtype)
    path.write_bytes(payload)
    if dates is not None:
        if len(dates) != np.asarray(data).shape[0]:
            raise RasterFormatError("date count must equal T")
        dates_path(path).write_text("".join(f"{d.isoformat()}\n" for d in dates), encoding="utf-8")


def read_raster(path, squeeze: bool = False) -> np.ndarray:
    arr = decode_raster(Path(path).read_bytes())
    if squeeze and arr.shape[-1] == 1:
        arr = arr[..., 0]
    return arr


def read_dates(path) -> list[dt.date]:
    text = dates_path(path).read_text(encoding="utf-8")
    return [dt.date.fromisoformat(line.strip()) for line in text.splitlines() if line.strip()]
