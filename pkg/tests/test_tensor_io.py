import numpy as np
import pytest

from cellquant.errors import CorruptedFileError, FormatError, ValidationError
from cellquant.tensorio import (as_tensor, read_raster, read_tensor,
                                write_raster, write_tensor)

KNOWN_BYTES = bytes.fromhex("43515431" "00" "01" "01000000" "07")


def test_single_byte_tensor_bytes(tmp_path):
    path = tmp_path / "t.cqt"
    write_tensor(np.array([7], dtype=np.uint8), path)
    assert path.read_bytes() == KNOWN_BYTES


def test_known_bytes_read_back(tmp_path):
    path = tmp_path / "t.cqt"
    path.write_bytes(KNOWN_BYTES)
    arr = read_tensor(path)
    assert arr.dtype == np.uint8
    assert arr.shape == (1,)
    assert arr[0] == 7


@pytest.mark.parametrize("dtype", [np.uint8, np.int32, np.float32, np.float64])
def test_round_trip_random(tmp_path, dtype):
    rng = np.random.default_rng(11)
    for i in range(25):
        ndim = int(rng.integers(1, 5))
        shape = tuple(int(rng.integers(1, 7)) for _ in range(ndim))
        if np.issubdtype(dtype, np.floating):
            arr = rng.normal(size=shape).astype(dtype)
        else:
            arr = rng.integers(0, 200, size=shape).astype(dtype)
        path = tmp_path / f"t{i}.cqt"
        write_tensor(arr, path)
        back = read_tensor(path)
        assert back.dtype == np.dtype(dtype)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()


def test_non_contiguous_input_written_in_c_order(tmp_path):
    arr = np.arange(12, dtype=np.int32).reshape(3, 4).T  # F-ordered view
    path = tmp_path / "t.cqt"
    write_tensor(arr, path)
    back = read_tensor(path)
    assert np.array_equal(back, arr)


def test_unsupported_dtype_rejected():
    with pytest.raises(ValidationError):
        as_tensor(np.zeros(3, dtype=np.int64))
    with pytest.raises(ValidationError):
        as_tensor(np.zeros(3, dtype=np.float16))


def test_zero_dim_rejected():
    with pytest.raises(ValidationError):
        as_tensor(np.float64(1.0))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.cqt"
    path.write_bytes(b"NOPE" + KNOWN_BYTES[4:])
    with pytest.raises(FormatError):
        read_tensor(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "bad.cqt"
    blob = bytearray(KNOWN_BYTES)
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_tensor(path)


def test_truncated_dims(tmp_path):
    path = tmp_path / "bad.cqt"
    path.write_bytes(KNOWN_BYTES[:8])
    with pytest.raises(CorruptedFileError):
        read_tensor(path)


def test_short_and_long_payload(tmp_path):
    path = tmp_path / "bad.cqt"
    path.write_bytes(KNOWN_BYTES[:-1])
    with pytest.raises(CorruptedFileError):
        read_tensor(path)
    path.write_bytes(KNOWN_BYTES + b"\x00")
    with pytest.raises(CorruptedFileError):
        read_tensor(path)


def test_raster_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, size=(9, 13, 3)).astype(np.uint8)
    path = tmp_path / "img.png"
    write_raster(img, path)
    assert np.array_equal(read_raster(path), img)


def test_raster_rejects_other_modes(tmp_path):
    from PIL import Image

    gray = tmp_path / "gray.png"
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(gray)
    with pytest.raises(FormatError):
        read_raster(gray)

    rgba = tmp_path / "rgba.png"
    Image.fromarray(np.zeros((4, 4, 4), dtype=np.uint8), mode="RGBA").save(rgba)
    with pytest.raises(FormatError):
        read_raster(rgba)

    jpeg = tmp_path / "img.jpg"
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB").save(jpeg)
    with pytest.raises(FormatError):
        read_raster(jpeg)
