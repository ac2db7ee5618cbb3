import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from chunkflow import fileio
from chunkflow.errors import ShapeError


def test_tensor_header_layout():
    buf = fileio.tensor_bytes(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert buf[:4] == b"FC2S"
    assert struct.unpack("<III", buf[4:16]) == (1, 2, 2)
    assert struct.unpack("<I", buf[16:20]) == (3,)
    assert struct.unpack("<6d", buf[20:]) == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_tensor_roundtrip(a):
    np.testing.assert_array_equal(fileio.tensor_from_bytes(fileio.tensor_bytes(a)), a)


def test_tensor_bad_magic():
    buf = bytearray(fileio.tensor_bytes(np.zeros(2)))
    buf[:4] = b"XXXX"
    with pytest.raises(ShapeError):
        fileio.tensor_from_bytes(bytes(buf))


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    back = fileio.load_pgm(fileio.save_pgm(tmp_path / "a.pgm", img))
    np.testing.assert_allclose(back, img, atol=1 / 255 / 2 + 1e-12)


def test_csv_float_repr_roundtrip(tmp_path):
    x = 0.1 + 0.2
    p = fileio.write_csv(tmp_path / "a.csv", ("a", "b"), [(1, x)])
    row = fileio.read_csv(p)[0]
    assert float(row["b"]) == x and row["a"] == "1"
