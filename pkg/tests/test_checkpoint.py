"""Checkpoint format: lossless round-trips and corruption detection."""

import numpy as np
import pytest

import xcam.checkpoint as CKPT
import xcam.graph as G
import xcam.zoo as ZOO
from xcam.checkpoint import CheckpointError


def test_round_trip_preserves_forward_bitwise(tmp_path):
    model = ZOO.build_model("teacher", size=16, seed=5)
    path = tmp_path / "m.ckpt"
    CKPT.save_model(model, str(path))
    loaded = CKPT.load_model(str(path))

    assert loaded.input_shape == model.input_shape
    assert loaded.num_classes == model.num_classes
    assert loaded.designated_activation_layer == model.designated_activation_layer
    for a, b in zip(model.layers, loaded.layers):
        assert a.kind == b.kind
        if a.weight is not None:
            np.testing.assert_array_equal(a.weight, b.weight)
            np.testing.assert_array_equal(a.bias, b.bias)

    img = np.random.default_rng(0).random((3, 16, 16))
    s0, _ = G.forward(model, img)
    s1, _ = G.forward(loaded, img)
    np.testing.assert_array_equal(s0, s1)


def test_save_is_deterministic(tmp_path):
    model = ZOO.build_model("student", size=8, num_classes=2, seed=1)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    CKPT.save_model(model, str(p1))
    CKPT.save_model(model, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOTACKPT\n" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        CKPT.load_model(str(p))


def test_truncation_rejected(tmp_path):
    model = ZOO.build_model("student", size=8, num_classes=2, seed=1)
    p = tmp_path / "m.ckpt"
    CKPT.save_model(model, str(p))
    blob = p.read_bytes()
    p.write_bytes(blob[: len(blob) - 40])
    with pytest.raises(CheckpointError):
        CKPT.load_model(str(p))


def test_trailing_bytes_rejected(tmp_path):
    model = ZOO.build_model("student", size=8, num_classes=2, seed=1)
    p = tmp_path / "m.ckpt"
    CKPT.save_model(model, str(p))
    p.write_bytes(p.read_bytes() + b"extra")
    with pytest.raises(CheckpointError):
        CKPT.load_model(str(p))
