import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from speckletact.errors import FormatError
from speckletact.formats import (decode_spkl, decode_tensor, encode_spkl, encode_tensor, read_pgm,
                                 read_spkl, write_pgm, write_spkl)

finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=finite32))
def test_spkl_roundtrip(img):
    assert np.array_equal(decode_spkl(encode_spkl(img)), img)


@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=0, max_size=4).map(tuple), elements=finite32))
def test_tensor_roundtrip(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.shape == arr.shape and np.array_equal(out, arr)


def test_spkl_layout_is_little_endian():
    blob = encode_spkl(np.array([[1.0, 2.0]], dtype=np.float32))
    assert blob[:4] == b"SPKL"
    assert struct.unpack("<III", blob[4:16]) == (1, 1, 2)
    assert struct.unpack("<2f", blob[16:]) == (1.0, 2.0)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-1],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:10],
])
def test_spkl_rejects_corruption(mutate):
    blob = encode_spkl(np.ones((3, 3), np.float32))
    with pytest.raises(FormatError):
        decode_spkl(mutate(blob))


@pytest.mark.parametrize("mutate", [
    lambda b: b"NOPE" + b[4:],
    lambda b: b[:-4],
    lambda b: b[:14],
    lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
])
def test_tensor_rejects_corruption(mutate):
    with pytest.raises(FormatError):
        decode_tensor(mutate(encode_tensor(np.ones((2, 3), np.float32))))


def test_spkl_file_roundtrip(tmp_path, rng):
    img = rng.standard_normal((5, 7)).astype(np.float32)
    write_spkl(tmp_path / "a.spkl", img)
    assert np.array_equal(read_spkl(tmp_path / "a.spkl"), img)


def test_pgm_roundtrip_and_scaling(tmp_path):
    img = np.array([[0, 128, 255]], dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    write_pgm(tmp_path / "b.pgm", np.array([[0.0, 0.5, 2.0]]))
    assert read_pgm(tmp_path / "b.pgm").tolist() == [[0, 64, 255]]


def test_pgm_header_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]


@pytest.mark.parametrize("blob", [b"P2\n1 1\n255\n\x00", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n"])
def test_pgm_rejects_bad_files(tmp_path, blob):
    (tmp_path / "bad.pgm").write_bytes(blob)
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "bad.pgm")
