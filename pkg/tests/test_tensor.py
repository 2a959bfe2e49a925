import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cwnm.tensor import (Layout, LayoutError, Tensor, TensorFormatError,
                         convert_layout, read_tensor, write_tensor)


def test_convert_same_layout_is_noop():
    t = Tensor.from_nhwc(np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4))
    same = convert_layout(t, Layout.NHWC)
    assert same.layout is Layout.NHWC
    assert same.data.tobytes() == t.data.tobytes()


def test_convert_degenerate_dims():
    t = Tensor.from_nhwc(np.full((1, 1, 1, 1), 7.5, dtype=np.float32))
    out = convert_layout(t, Layout.CNHW)
    assert out.data.tolist() == [7.5]


def test_convert_matches_index_formula():
    # oracle: walk every logical index through both linearization formulas
    N, C, H, W = 2, 3, 4, 5
    rng = np.random.default_rng(0)
    t = Tensor.from_nhwc(rng.standard_normal((N, H, W, C)).astype(np.float32))
    out = convert_layout(t, Layout.CNHW)
    for n in range(N):
        for c in range(C):
            for h in range(H):
                for w in range(W):
                    nhwc_i = ((n * H + h) * W + w) * C + c
                    cnhw_i = ((c * N + n) * H + h) * W + w
                    assert out.data[cnhw_i] == t.data[nhwc_i]


def test_convert_round_trip_bit_exact():
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    arr[0, 0, 0, 0] = -0.0
    t = Tensor.from_nhwc(arr)
    back = convert_layout(convert_layout(t, Layout.CNHW), Layout.NHWC)
    assert back.data.tobytes() == t.data.tobytes()


def test_convert_rejects_non_4d():
    t = Tensor.from_matrix(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(LayoutError):
        convert_layout(t, Layout.CNHW)
    t4 = Tensor.from_nhwc(np.zeros((1, 2, 2, 1), dtype=np.float32))
    with pytest.raises(LayoutError):
        convert_layout(t4, Layout.ROW_MAJOR_2D)


def test_dims_data_mismatch_rejected():
    with pytest.raises(ValueError):
        Tensor((2, 2), Layout.ROW_MAJOR_2D, np.zeros(5, dtype=np.float32))


def test_file_round_trip_zero_tensor(tmp_path):
    t = Tensor.from_nhwc(np.zeros((1, 1, 1, 1), dtype=np.float32))
    path = tmp_path / "t.cwnm"
    write_tensor(t, path)
    back = read_tensor(path)
    assert back.dims == t.dims
    assert back.layout is t.layout
    assert back.data.tobytes() == t.data.tobytes()


def test_file_round_trip_random(tmp_path, rng):
    arr = rng.standard_normal((4, 7, 7, 8)).astype(np.float32)
    arr[0, 0, 0, 0] = -0.0
    t = Tensor.from_nhwc(arr)
    path = tmp_path / "t.cwnm"
    write_tensor(t, path)
    back = read_tensor(path)
    assert back.data.tobytes() == t.data.tobytes()
    assert back.dims == t.dims


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.cwnm"
    t = Tensor.from_matrix(np.zeros((1, 1), dtype=np.float32))
    write_tensor(t, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(TensorFormatError, match="magic"):
        read_tensor(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "short.cwnm"
    t = Tensor.from_matrix(np.ones((2, 3), dtype=np.float32))
    write_tensor(t, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(TensorFormatError):
        read_tensor(path)


def test_bad_version_and_dtype_rejected(tmp_path):
    path = tmp_path / "v.cwnm"
    t = Tensor.from_matrix(np.ones((1, 2), dtype=np.float32))
    write_tensor(t, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9  # version little-endian low byte
    path.write_bytes(bytes(raw))
    with pytest.raises(TensorFormatError, match="version"):
        read_tensor(path)
    raw = bytearray(write_bytes_of(t))
    raw[8] = 3  # dtype code
    path.write_bytes(bytes(raw))
    with pytest.raises(TensorFormatError, match="dtype"):
        read_tensor(path)


def write_bytes_of(t):
    import io
    import tempfile
    with tempfile.NamedTemporaryFile(suffix=".cwnm", delete=False) as f:
        name = f.name
    write_tensor(t, name)
    return open(name, "rb").read()


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 2**32 - 1))
def test_layout_round_trip_property(n, c, h, w, seed):
    arr = np.random.default_rng(seed).standard_normal((n, h, w, c)).astype(np.float32)
    t = Tensor.from_nhwc(arr)
    back = convert_layout(convert_layout(t, Layout.CNHW), Layout.NHWC)
    assert back.data.tobytes() == t.data.tobytes()


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_file_round_trip_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal((rows, cols)).astype(np.float32)
    arr.flat[0] = -0.0
    t = Tensor.from_matrix(arr)
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/t.cwnm"
        write_tensor(t, path)
        assert read_tensor(path).data.tobytes() == t.data.tobytes()
