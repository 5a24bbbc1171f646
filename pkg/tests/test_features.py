import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from planttrack.errors import FormatError, ValidationError
from planttrack.features import (
    FeatureMap,
    apply_depth_mask,
    downsample_mask,
    foreground_from_depth,
    mask_for_features,
    read_tensor,
    write_tensor,
)

from oracles import block_majority


def test_minimal_tensor_layout(tmp_path):
    path = tmp_path / "t.pttn"
    write_tensor(path, [1], [0.0])
    raw = path.read_bytes()
    # magic, version, dtype, rank, one uint32 dim, one float32
    assert raw == b"PTTN\x01\x01\x01" + b"\x01\x00\x00\x00" + b"\x00\x00\x00\x00"
    dims, data = read_tensor(path)
    assert dims == (1,)
    assert data.tolist() == [0.0]


def test_roundtrip_2x3(tmp_path):
    values = np.array([1.5, -2.25, 3e-7, 0.0, -0.0, 1e30], dtype=np.float32)
    write_tensor(tmp_path / "a.pttn", [2, 3], values)
    dims, data = read_tensor(tmp_path / "a.pttn")
    assert dims == (2, 3)
    assert data.tobytes() == values.tobytes()


def test_roundtrip_rank3(tmp_path):
    v = np.random.default_rng(1).standard_normal((4, 4, 8)).astype(np.float32)
    write_tensor(tmp_path / "f.pttn", [4, 4, 8], v)
    dims, data = read_tensor(tmp_path / "f.pttn")
    assert dims == (4, 4, 8)
    assert data.tobytes() == v.tobytes()


def test_length_mismatch(tmp_path):
    with pytest.raises(ValidationError, match="length mismatch: 3 != 4"):
        write_tensor(tmp_path / "x.pttn", [2, 2], [1, 2, 3])


def test_nonfinite_rejected_with_position(tmp_path):
    with pytest.raises(ValidationError, match=r"\(1, 0\)"):
        write_tensor(tmp_path / "x.pttn", [2, 2], [1.0, 2.0, np.nan, 4.0])


@pytest.mark.parametrize("dims", [[], [1, 1, 1, 1, 1], [0, 2]])
def test_bad_dims(tmp_path, dims):
    with pytest.raises(ValidationError):
        write_tensor(tmp_path / "x.pttn", dims, [])


def test_bad_magic(tmp_path):
    path = tmp_path / "x.pttn"
    path.write_bytes(b"XXXX\x01\x01\x01\x01\x00\x00\x00\x00\x00\x00\x00")
    with pytest.raises(FormatError, match="bad magic"):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "x.pttn"
    write_tensor(path, [3], [1, 2, 3])
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError, match="truncated payload"):
        read_tensor(path)


@pytest.mark.parametrize("offset,byte,msg", [(4, 2, "version"), (5, 2, "dtype")])
def test_unsupported_header(tmp_path, offset, byte, msg):
    path = tmp_path / "x.pttn"
    write_tensor(path, [1], [1.0])
    raw = bytearray(path.read_bytes())
    raw[offset] = byte
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match=msg):
        read_tensor(path)


def test_nonfinite_payload_rejected(tmp_path):
    path = tmp_path / "x.pttn"
    write_tensor(path, [2], [1.0, 2.0])
    raw = path.read_bytes()[:-4] + np.array([np.inf], dtype="<f4").tobytes()
    path.write_bytes(raw)
    with pytest.raises(FormatError, match="non-finite"):
        read_tensor(path)


finite_f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5), elements=finite_f32))
def test_roundtrip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rt") / "t.pttn"
    write_tensor(path, arr.shape, arr)
    dims, data = read_tensor(path)
    assert dims == arr.shape
    assert data.tobytes() == arr.tobytes()


def test_downsample_uniform_block():
    assert downsample_mask(np.ones((14, 14), dtype=np.uint8), 14).tolist() == [[1]]


def test_downsample_tie_goes_foreground():
    m = np.zeros(196, dtype=np.uint8)
    m[:98] = 1
    assert downsample_mask(m.reshape(14, 14), 14).tolist() == [[1]]
    m[97] = 0
    assert downsample_mask(m.reshape(14, 14), 14).tolist() == [[0]]


def test_downsample_left_half():
    m = np.zeros((28, 28), dtype=np.uint8)
    m[:, :14] = 1
    expected = block_majority(m.tolist(), 14)
    assert expected == [[1, 0], [1, 0]]
    assert downsample_mask(m, 14).tolist() == expected


def test_downsample_matches_brute_force_random():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        factor = int(rng.integers(1, 5))
        h = int(rng.integers(factor, 4 * factor + 3))
        w = int(rng.integers(factor, 4 * factor + 3))
        m = (rng.uniform(size=(h, w)) < rng.uniform()).astype(np.uint8)
        assert downsample_mask(m, factor).tolist() == block_majority(m.tolist(), factor)


def test_downsample_errors():
    with pytest.raises(ValidationError):
        downsample_mask(np.ones((14, 14)), 0)
    with pytest.raises(ValidationError):
        downsample_mask(np.ones((13, 20)), 14)
    with pytest.raises(ValidationError):
        downsample_mask(np.full((14, 14), 2), 14)


def test_foreground_band():
    assert foreground_from_depth(np.full((3, 4), 1.0), 0.5, 2.0).min() == 1
    assert foreground_from_depth(np.full((3, 4), 5.0), 0.5, 2.0).max() == 0
    row = np.array([[0.4, 0.5, 2.0, 2.1]])
    assert foreground_from_depth(row, 0.5, 2.0).tolist() == [[0, 1, 1, 0]]


def test_foreground_errors():
    with pytest.raises(ValidationError):
        foreground_from_depth(np.ones((2, 2)), 2.0, 2.0)
    with pytest.raises(ValidationError):
        foreground_from_depth(np.ones((2, 2)), -1.0, 2.0)
    with pytest.raises(ValidationError):
        foreground_from_depth(np.full((2, 2), -0.5), 0.1, 2.0)


@settings(max_examples=200, deadline=None)
@given(
    hnp.arrays(np.float64, (5, 6), elements=st.floats(0, 10)),
    st.floats(0, 5),
    st.floats(0.01, 5),
    st.floats(0, 2),
    st.floats(0, 2),
)
def test_foreground_monotone_in_band(depth, near, width, grow_lo, grow_hi):
    far = near + width
    inner = foreground_from_depth(depth, near, far)
    outer = foreground_from_depth(depth, max(0.0, near - grow_lo), far + grow_hi)
    assert np.all(outer >= inner)


def test_apply_mask_examples():
    f = FeatureMap(np.array([[[1, 2], [3, 4]]], dtype=np.float32))  # 1 row, 2 cells, 2 channels
    out = apply_depth_mask(f, np.array([[1, 0]]))
    assert out.data.tolist() == [[[1, 2], [0, 0]]]
    rng = np.random.default_rng(0)
    g = FeatureMap(rng.standard_normal((4, 5, 3)))
    assert apply_depth_mask(g, np.ones((4, 5))).data.tobytes() == g.data.tobytes()
    assert not apply_depth_mask(g, np.zeros((4, 5))).data.any()


def test_apply_mask_idempotent_and_zero_bits():
    rng = np.random.default_rng(3)
    f = FeatureMap(rng.standard_normal((6, 7, 4)))
    m = (rng.uniform(size=(6, 7)) > 0.5).astype(np.uint8)
    once = apply_depth_mask(f, m)
    twice = apply_depth_mask(once, m)
    assert once.data.tobytes() == twice.data.tobytes()
    # background must be +0.0, not -0.0
    assert np.all(once.data[m == 0].view(np.uint32) == 0)


def test_apply_mask_dimension_mismatch():
    with pytest.raises(ValidationError, match="dimension mismatch"):
        apply_depth_mask(FeatureMap(np.zeros((2, 2, 1))), np.ones((2, 3)))


def test_feature_map_invariants():
    with pytest.raises(ValidationError):
        FeatureMap(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        FeatureMap(np.full((1, 1, 1), np.nan))


def test_mask_for_features_pixel_depth():
    depth = np.full((28, 42), 5.0)
    depth[:14, :14] = 1.0
    m = mask_for_features(depth, (2, 3))
    assert m.tolist() == [[1, 0, 0], [0, 0, 0]]
