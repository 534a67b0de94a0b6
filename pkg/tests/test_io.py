import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ruquant import io
from ruquant.errors import InputError, LoadError

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def test_roundtrip_small_bit_exact(tmp_path):
    X = np.array([[1.5, -2.0], [0.0, 3.0], [4.0, 5.0]])
    io.save_tensor(tmp_path / "x.ruqt", X)
    Y = io.load_tensor(tmp_path / "x.ruqt")
    assert Y.shape == (3, 2) and Y.tobytes() == X.tobytes()


def test_header_layout():
    buf = io.encode_tensor(np.zeros((3, 2)))
    assert buf[:4] == b"RUQT"
    assert struct.unpack_from("<IIIQQ", buf, 4) == (1, 0, 2, 3, 2)
    assert len(buf) == 32 + 6 * 8


def test_negative_zero_and_subnormals_preserved():
    X = np.array([[-0.0, 5e-324, np.finfo(float).max, -np.finfo(float).tiny]])
    Y, _ = io.decode_tensor(io.encode_tensor(X))
    assert Y.tobytes() == X.tobytes()


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=0, max_side=7), elements=finite))
def test_roundtrip_property(X):
    Y, sections = io.decode_tensor(io.encode_tensor(X))
    assert sections == [] and Y.shape == X.shape and Y.tobytes() == X.tobytes()


def test_int32_payload_and_sections():
    codes = np.array([[0, 15], [7, 3]], dtype=np.int32)
    buf = io.encode_tensor(codes, [("ABCD", b"xyz"), ("EFGH", b"")])
    arr, sections = io.decode_tensor(buf)
    assert arr.dtype == np.int32 and np.array_equal(arr, codes)
    assert sections == [("ABCD", b"xyz"), ("EFGH", b"")]


def test_csv_parse(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2\n3,4\n")
    assert np.array_equal(io.load_tensor(p), [[1.0, 2.0], [3.0, 4.0]])


def test_csv_roundtrip_exact(tmp_path):
    X = np.random.default_rng(1).standard_normal((4, 3)) * 1e7
    io.save_tensor(tmp_path / "a.csv", X)
    assert io.load_tensor(tmp_path / "a.csv").tobytes() == X.tobytes()


@pytest.mark.parametrize("text", ["1,2\n3\n", "1,x\n", "", "1,nan\n"])
def test_csv_errors(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(InputError):
        io.load_tensor(p)


def _mutate(buf, offset, fmt, value):
    b = bytearray(buf)
    struct.pack_into(fmt, b, offset, value)
    return bytes(b)


GOOD = io.encode_tensor(np.arange(6.0).reshape(2, 3))


@pytest.mark.parametrize("buf,offset,text", [
    (b"XXXX" + GOOD[4:], 0, "bad magic at offset 0"),
    (_mutate(GOOD, 4, "<I", 2), 4, "version"),
    (_mutate(GOOD, 8, "<I", 9), 8, "dtype"),
    (_mutate(GOOD, 12, "<I", 3), 12, "rank"),
    (_mutate(GOOD, 16, "<Q", 1 << 63), 16, "dimension overflow"),
    (GOOD[:-3], len(GOOD) - 3, "truncated payload"),
    (GOOD[:20], 20, "truncated header"),
    (_mutate(GOOD, 32 + 2 * 8, "<d", float("inf")), 48, "non-finite"),
])
def test_load_errors_name_offset(buf, offset, text):
    with pytest.raises(LoadError, match=text) as exc:
        io.decode_tensor(buf)
    assert exc.value.offset == offset
    assert f"at offset {offset}" in str(exc.value)


def test_bad_magic_from_file(tmp_path):
    p = tmp_path / "x.ruqt"
    p.write_bytes(b"XXXX" + GOOD[4:])
    with pytest.raises(LoadError, match="bad magic at offset 0"):
        io.load_tensor(p)


def test_truncated_section():
    buf = io.encode_tensor(np.zeros((1, 1)), [("ABCD", b"12345")])
    with pytest.raises(LoadError, match="truncated section"):
        io.decode_tensor(buf[:-1])


def test_refuses_to_write_nonfinite_or_rank3(tmp_path):
    with pytest.raises(InputError):
        io.save_tensor(tmp_path / "x.ruqt", np.array([[np.nan]]))
    with pytest.raises(InputError):
        io.encode_tensor(np.zeros((2, 2, 2)))


def test_missing_file(tmp_path):
    with pytest.raises(InputError, match="no such file"):
        io.load_tensor(tmp_path / "absent.ruqt")


def test_section_map_requires():
    with pytest.raises(LoadError, match="QSCL"):
        io.section_map([("ABCD", b"")], ("QSCL",))
