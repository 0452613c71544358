"""Heatmap rendering: a fixed blue-green-red colormap alpha-blended onto the
input image at 50%."""

from __future__ import annotations

import numpy as np


def colormap(values):
    """[H,W] intensities in [0,1] to [3,H,W] colors: blue at 0, green at
    0.5, red at 1, linear in between."""
    t = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    low = t < 0.5
    r = np.where(low, 0.0, 2.0 * t - 1.0)
    g = np.where(low, 2.0 * t, 2.0 - 2.0 * t)
    b = np.where(low, 1.0 - 2.0 * t, 0.0)
    return np.stack([r, g, b])


def render_heatmap(values, image):
    """0.5 * image + 0.5 * colormap, pointwise."""
    image = np.asarray(image, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != image.shape[-2:]:
        raise ValueError(f"saliency {values.shape} does not align with image {image.shape}")
    return 0.5 * image + 0.5 * colormap(values)
