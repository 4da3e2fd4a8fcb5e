"""Binary tensor container and checkpoint directory round-trips."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visrep.errors import FormatError, TruncatedError
from visrep.vrt import (
    load_checkpoint,
    read_tensor,
    save_checkpoint,
    tensor_bytes,
    tensor_from_bytes,
    write_tensor,
)


@given(
    st.lists(st.integers(min_value=1, max_value=5), min_size=0, max_size=4),
    st.integers(min_value=0, max_value=2**32 - 1),
)
@settings(max_examples=60, deadline=None)
def test_round_trip_preserves_shape_and_values(shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    back = tensor_from_bytes(tensor_bytes(arr))
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_header_layout_is_little_endian(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = tensor_bytes(arr)
    assert blob[:4] == b"VRT1"
    rank, d0, d1 = struct.unpack("<III", blob[4:16])
    assert (rank, d0, d1) == (2, 2, 3)
    assert struct.unpack("<f", blob[16:20])[0] == 0.0


def test_scalar_rank_zero():
    back = tensor_from_bytes(tensor_bytes(np.float32(3.5)))
    assert back.shape == () and float(back) == 3.5


def test_bad_magic_rejected():
    with pytest.raises(FormatError):
        tensor_from_bytes(b"NOPE" + b"\x00" * 16)


def test_truncated_payload_rejected():
    blob = tensor_bytes(np.ones((4, 4), dtype=np.float32))
    with pytest.raises(TruncatedError):
        tensor_from_bytes(blob[:-8])


def test_truncated_header_rejected():
    with pytest.raises(TruncatedError):
        tensor_from_bytes(b"VRT1\x02")


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 2, 4)).astype(np.float32)
    p = tmp_path / "x.vrt"
    write_tensor(p, arr)
    assert np.array_equal(read_tensor(p), arr)


def test_checkpoint_round_trip_preserves_order(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "backbone.stage0.w": rng.standard_normal((4, 3)).astype(np.float32),
        "head.bias": rng.standard_normal(4).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
    }
    d = tmp_path / "ckpt"
    save_checkpoint(d, tensors)
    back = load_checkpoint(d)
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], np.asarray(tensors[k]))


def test_checkpoint_bytes_deterministic(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"a": rng.standard_normal((2, 2)).astype(np.float32)}
    d1, d2 = tmp_path / "c1", tmp_path / "c2"
    save_checkpoint(d1, tensors)
    save_checkpoint(d2, tensors)
    for f in sorted(p.name for p in d1.iterdir()):
        assert (d1 / f).read_bytes() == (d2 / f).read_bytes()


def test_missing_index_rejected(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)
