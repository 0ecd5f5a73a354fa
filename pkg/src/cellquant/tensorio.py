"""Portable tensor serialization and raster ingestion.

Every per-pixel quantity in the pipeline (images, instance and class maps,
flow fields, probability maps, logits) travels through one bit-exact
container format so fixtures can be produced and consumed across tools:

    bytes 0..3   magic ``CQT1``
    byte  4      dtype code: 0=u8, 1=i32, 2=f32, 3=f64
    byte  5      ndim (at least 1)
    next 4*ndim  dims, little-endian u32, each in [1, 2**31 - 1]
    rest         payload, row-major (C order), little-endian

Arrays are plain ``numpy.ndarray`` restricted to the four supported
dtypes; :func:`write_tensor` / :func:`read_tensor` round-trip them
bit-exactly regardless of host endianness.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptedFileError, FormatError, ValidationError

MAGIC = b"CQT1"

# dtype code <-> little-endian numpy dtype
_CODE_TO_DTYPE = {
    0: np.dtype("<u1"),
    1: np.dtype("<i4"),
    2: np.dtype("<f4"),
    3: np.dtype("<f8"),
}
_KIND_TO_CODE = {"u1": 0, "i4": 1, "f4": 2, "f8": 3}

MAX_DIM = 2**31 - 1


def supported_dtype(dtype) -> np.dtype:
    """Return the canonical little-endian form of a supported dtype.

    Raises ValidationError for anything outside {u8, i32, f32, f64}.
    """
    dt = np.dtype(dtype)
    key = dt.str.lstrip("<>=|")
    if key not in _KIND_TO_CODE:
        raise ValidationError(
            f"unsupported tensor dtype {dt}; expected one of u8, i32, f32, f64"
        )
    return np.dtype("<" + key)


def as_tensor(array, dtype=None) -> np.ndarray:
    """Coerce ``array`` into a validated tensor (C-contiguous ndarray of a
    supported dtype with ndim >= 1)."""
    arr = np.asarray(array, dtype=dtype)
    dt = supported_dtype(arr.dtype)
    # check before ascontiguousarray, which silently promotes 0-d to 1-d
    if arr.ndim < 1:
        raise ValidationError("tensors must have at least one dimension")
    arr = np.ascontiguousarray(arr, dtype=dt)
    for d in arr.shape:
        if d < 1 or d > MAX_DIM:
            raise ValidationError(f"invalid dimension size {d}")
    return arr


def write_tensor(t: np.ndarray, destination) -> None:
    """Serialize ``t`` to ``destination`` in the CQT1 format."""
    arr = as_tensor(t)
    code = _KIND_TO_CODE[arr.dtype.str.lstrip("<>=|")]
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(destination, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(source) -> np.ndarray:
    """Read a CQT1 file back into an ndarray (inverse of write_tensor)."""
    path = Path(source)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a CQT1 tensor file (bad magic)")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if ndim < 1:
        raise FormatError(f"{path}: ndim must be at least 1")
    header_end = 6 + 4 * ndim
    if len(blob) < header_end:
        raise CorruptedFileError(f"{path}: truncated dimension list")
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: zero-sized dimension in {shape}")
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = blob[header_end:]
    if len(payload) != expected:
        raise CorruptedFileError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return np.ascontiguousarray(arr)


def read_raster(source) -> np.ndarray:
    """Load an 8-bit RGB PNG as an H x W x 3 u8 tensor.

    Anything that is not 8-bit RGB (grayscale, palette, RGBA, 16-bit) is
    rejected rather than silently converted.
    """
    path = Path(source)
    with Image.open(path) as img:
        if img.format != "PNG":
            raise FormatError(f"{path}: expected a PNG file, got {img.format}")
        if img.mode != "RGB":
            raise FormatError(
                f"{path}: unsupported PNG mode {img.mode}; only 8-bit RGB is accepted"
            )
        arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"{path}: decoded shape {arr.shape} is not H x W x 3")
    return arr


def write_raster(t: np.ndarray, destination) -> None:
    """Write an H x W x 3 u8 tensor as an RGB PNG."""
    arr = np.asarray(t)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError("write_raster expects an H x W x 3 u8 array")
    Image.fromarray(arr, mode="RGB").save(destination, format="PNG")
