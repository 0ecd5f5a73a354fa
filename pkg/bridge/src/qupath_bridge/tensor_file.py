"""Reader/writer for the engine's ``CQT1`` tensor container.

The bridge talks to the engine only through files, so it carries its own
implementation of the container: 4-byte magic ``CQT1``, one byte dtype
code (0 = uint8, 1 = int32, 2 = float32, 3 = float64), one byte rank,
rank little-endian uint32 dimensions, then the row-major payload.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import TensorFileError

MAGIC = b"CQT1"

_CODE_TO_DTYPE = {
    0: np.dtype(np.uint8),
    1: np.dtype("<i4"),
    2: np.dtype("<f4"),
    3: np.dtype("<f8"),
}
_DTYPE_TO_CODE = {
    np.dtype(np.uint8): 0,
    np.dtype(np.int32): 1,
    np.dtype(np.float32): 2,
    np.dtype(np.float64): 3,
}

MAX_RANK = 8


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise TensorFileError(f"{path}: not a CQT1 tensor file")
    code, ndim = blob[4], blob[5]
    if code not in _CODE_TO_DTYPE:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    if not 1 <= ndim <= MAX_RANK:
        raise TensorFileError(f"{path}: bad rank {ndim}")
    header_end = 6 + 4 * ndim
    if len(blob) < header_end:
        raise TensorFileError(f"{path}: truncated header")
    dims = struct.unpack(f"<{ndim}I", blob[6:header_end])
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = blob[header_end:]
    if len(payload) != expected:
        raise TensorFileError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise TensorFileError(f"unsupported rank {arr.ndim}")
    header = MAGIC + bytes([code, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())
