"""Heatmap colormap and overlay rendering."""

import numpy as np
import pytest

import xcam.render as R


def test_colormap_endpoints():
    cmap = R.colormap(np.array([[0.0, 0.5, 1.0]]))
    assert cmap.shape == (3, 1, 3)
    assert np.allclose(cmap[:, 0, 0], [0.0, 0.0, 1.0])  # cold end: blue
    assert np.allclose(cmap[:, 0, 1], [0.0, 1.0, 0.0])  # midpoint: green
    assert np.allclose(cmap[:, 0, 2], [1.0, 0.0, 0.0])  # hot end: red


def test_colormap_range():
    rng = np.random.default_rng(0)
    cmap = R.colormap(rng.random((6, 7)))
    assert cmap.shape == (3, 6, 7)
    assert cmap.min() >= 0.0 and cmap.max() <= 1.0


def test_render_heatmap_blend():
    image = np.full((3, 2, 2), 0.4)
    values = np.full((2, 2), 0.5)
    out = R.render_heatmap(values, image)
    expected = 0.5 * image + 0.5 * R.colormap(values)
    assert np.allclose(out, expected)
    # midpoint of the map contributes pure green
    assert np.allclose(out[1], 0.5 * 0.4 + 0.5 * 1.0)
    assert np.allclose(out[0], 0.2)


def test_render_heatmap_shape_check():
    with pytest.raises(ValueError, match="align"):
        R.render_heatmap(np.ones((2, 2)), np.ones((3, 4, 4)))
