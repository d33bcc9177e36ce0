import numpy as np
import pytest

from dearfed.params import (MAGIC_QEEN, LayoutEntry, ModelParams, layout_from_shapes,
                            read_params, write_params)


def sample_params(rng):
    layout = layout_from_shapes([("enc.w", (3, 4)), ("enc.b", (4,)), ("head", (4, 1))])
    return ModelParams(rng.normal(size=20), layout)


def test_layout_from_shapes_offsets_partition():
    layout = layout_from_shapes([("a", (2, 3)), ("b", (5,))])
    assert layout == (LayoutEntry("a", 0, (2, 3)), LayoutEntry("b", 6, (5,)))


def test_layout_must_cover_vector():
    layout = layout_from_shapes([("a", (2,))])
    with pytest.raises(ValueError):
        ModelParams(np.zeros(3), layout)


def test_layout_offsets_must_be_contiguous():
    bad = (LayoutEntry("a", 0, (2,)), LayoutEntry("b", 3, (1,)))
    with pytest.raises(ValueError):
        ModelParams(np.zeros(4), bad)


def test_layer_view_reshapes():
    p = sample_params(np.random.default_rng(0))
    assert p.layer("enc.w").shape == (3, 4)
    np.testing.assert_array_equal(p.layer("enc.b"), p.values[12:16])
    with pytest.raises(KeyError):
        p.layer("missing")


def test_round_trip_is_bit_identical(tmp_path):
    p = sample_params(np.random.default_rng(1))
    path = tmp_path / "model.bin"
    write_params(path, p)
    q = read_params(path)
    np.testing.assert_array_equal(q.values, p.values)
    assert q.layout == p.layout


def test_magic_tag_mismatch_is_rejected(tmp_path):
    p = sample_params(np.random.default_rng(2))
    path = tmp_path / "model.bin"
    write_params(path, p, magic=MAGIC_QEEN)
    with pytest.raises(ValueError, match="tag"):
        read_params(path)  # default expects the forecaster tag
    q = read_params(path, magic=MAGIC_QEEN)
    np.testing.assert_array_equal(q.values, p.values)


def test_copy_is_independent():
    p = sample_params(np.random.default_rng(3))
    q = p.copy()
    q.values[0] += 1.0
    assert p.values[0] != q.values[0]
