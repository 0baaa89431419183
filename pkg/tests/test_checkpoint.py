import numpy as np
import pytest

from ctxasr.checkpoint import dumps, load_checkpoint, loads, save_checkpoint, tensors_hash
from ctxasr.errors import DataError, NumericalError


def test_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"b": rng.standard_normal(5), "a": rng.standard_normal((3, 4)) * 1e-300,
               "s": np.array(np.pi)}
    digest = save_checkpoint(tmp_path / "m.ckpt", tensors)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back["a"].tobytes() == tensors["a"].tobytes()
    np.testing.assert_array_equal(back["b"], tensors["b"][None, :])
    assert back["s"].shape == (1, 1) and back["s"][0, 0] == np.pi
    assert digest == tensors_hash(tensors)


def test_layout_sorted_with_header():
    text = dumps({"z": np.ones((1, 2)), "a": np.zeros((2, 1))})
    lines = text.splitlines()
    assert lines[0] == "CKPT v1"
    assert lines[1] == "a 2 1" and lines[4] == "z 1 2"
    assert lines[5] == "1.0 1.0"


def test_rejects_non_finite_and_bad_names():
    with pytest.raises(NumericalError):
        dumps({"w": np.array([np.nan])})
    with pytest.raises(DataError):
        dumps({"bad name": np.zeros(1)})


def test_rejects_truncated_or_foreign_files():
    with pytest.raises(DataError):
        loads("hello\n")
    with pytest.raises(DataError):
        loads("CKPT v1\nw 2 2\n1.0 2.0\n")
    with pytest.raises(DataError):
        loads("CKPT v1\nw 1 2\n1.0\n")
