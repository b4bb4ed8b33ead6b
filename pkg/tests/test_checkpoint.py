import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrepopt.checkpoint import load_checkpoint, save_checkpoint
from fedrepopt.errors import CheckpointError
from fedrepopt.models import ModelSpec, build_model


def test_round_trip_fp64_lossless(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a/w": rng.standard_normal((3, 2, 3, 3)),
        "a/b": rng.standard_normal(3),
        "meta/scalar": np.float64(4.25).reshape(()),
    }
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].dtype == np.float64
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_round_trip_fp32(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"x": rng.standard_normal((4, 4)).astype(np.float32)}
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert loaded["x"].dtype == np.float32
    np.testing.assert_array_equal(loaded["x"], tensors["x"])


def test_write_is_deterministic(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"p/q": rng.standard_normal(5), "r": rng.standard_normal((2, 2))}
    save_checkpoint(tmp_path / "a.ckpt", tensors)
    save_checkpoint(tmp_path / "b.ckpt", tensors)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_corrupted_byte_fails_crc(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"x": np.arange(6, dtype=np.float64)})
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"x": np.arange(6, dtype=np.float64)})
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_duplicate_ids_rejected_on_save(tmp_path):
    class Dup(dict):
        def items(self):
            yield "x", np.zeros(1)
            yield "x", np.zeros(1)

        def __len__(self):
            return 2

    with pytest.raises(CheckpointError, match="duplicate"):
        save_checkpoint(tmp_path / "t.ckpt", Dup())


def test_integer_arrays_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="dtype"):
        save_checkpoint(tmp_path / "t.ckpt", {"x": np.arange(3)})


def test_model_state_round_trips_through_checkpoint(tmp_path):
    spec = ModelSpec("ghost_micro", (4, 8), (1, 1), 5, 16)
    model = build_model(spec, "rep_tr", seed=3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model.state_dict())
    other = build_model(spec, "rep_tr", seed=77)
    other.load_state_dict(load_checkpoint(path))
    for (ida, a), (idb, b) in zip(model.parameter_list(), other.parameter_list()):
        assert ida == idb
        np.testing.assert_array_equal(a.data, b.data)


@given(
    st.lists(
        st.tuples(
            st.text(st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=20),
            st.integers(0, 3),
        ),
        min_size=1,
        max_size=6,
        unique_by=lambda t: t[0],
    ),
    st.booleans(),
)
@settings(max_examples=30, deadline=None)
def test_round_trip_property(tmp_path_factory, entries, use_fp32):
    rng = np.random.default_rng(42)
    dtype = np.float32 if use_fp32 else np.float64
    tensors = {}
    for name, rank in entries:
        shape = tuple(rng.integers(1, 4, size=rank))
        tensors[name] = rng.standard_normal(shape).astype(dtype)
    path = tmp_path_factory.mktemp("ckpt") / "t.ckpt"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])
