"""Numpy implementations of the convolution and pooling kernels.

All arrays are float64, NCHW layout. Convolutions are cross-correlations
(no kernel flip), zero-padded, with a single integer stride. The three conv
kernels form a closed set under differentiation: the backward-data and
backward-weight kernels are the adjoints of the forward kernel in its two
(bilinear) arguments.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """y[b,o,i,j] = sum_{c,p,q} x[b,c,i*s+p-pad,j*s+q-pad] * w[o,c,p,q]."""
    b, ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2:
        raise ValueError(f"conv2d: input has {ci} channels, weight expects {ci2}")
    oh, ow = _out_dim(h, kh, stride, pad), _out_dim(wd, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} (pad={pad})")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    y = np.zeros((b, co, oh, ow))
    # Accumulate one kernel offset at a time: small kernels, no im2col copy.
    for p in range(kh):
        for q in range(kw):
            patch = xp[:, :, p : p + oh * stride : stride, q : q + ow * stride : stride]
            y += np.einsum("oc,bchw->bohw", w[:, :, p, q], patch, optimize=True)
    return y


def conv2d_backward_data(
    w: np.ndarray, gy: np.ndarray, input_hw: tuple[int, int], stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Adjoint of conv2d_forward in x: gx such that <gx, u> == <gy, conv(u, w)>."""
    co, ci, kh, kw = w.shape
    b, co2, oh, ow = gy.shape
    if co != co2:
        raise ValueError(f"conv2d_backward_data: gradient has {co2} channels, weight has {co}")
    h, wd = input_hw
    gxp = np.zeros((b, ci, h + 2 * pad, wd + 2 * pad))
    for p in range(kh):
        for q in range(kw):
            contrib = np.einsum("oc,bohw->bchw", w[:, :, p, q], gy, optimize=True)
            gxp[:, :, p : p + oh * stride : stride, q : q + ow * stride : stride] += contrib
    if pad:
        return gxp[:, :, pad : pad + h, pad : pad + wd]
    return gxp


def conv2d_backward_weight(
    x: np.ndarray, gy: np.ndarray, kernel_hw: tuple[int, int], stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Adjoint of conv2d_forward in w: gw such that <gw, u> == <gy, conv(x, u)>."""
    b, ci, h, wd = x.shape
    b2, co, oh, ow = gy.shape
    if b != b2:
        raise ValueError(f"conv2d_backward_weight: batch mismatch {b} vs {b2}")
    kh, kw = kernel_hw
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gw = np.zeros((co, ci, kh, kw))
    for p in range(kh):
        for q in range(kw):
            patch = xp[:, :, p : p + oh * stride : stride, q : q + ow * stride : stride]
            gw[:, :, p, q] = np.einsum("bohw,bchw->oc", gy, patch, optimize=True)
    return gw


def maxpool2d_forward(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (pooled, idx) where idx holds flat (h*W+w) input positions of each max."""
    b, c, h, w = x.shape
    oh, ow = _out_dim(h, k, stride, 0), _out_dim(w, k, stride, 0)
    if oh < 1 or ow < 1:
        raise ValueError(f"maxpool2d: window {k} does not fit input {h}x{w}")
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, oh, ow, k, k),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = windows.reshape(b, c, oh, ow, k * k)
    local = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    # local index -> absolute flat position in the (h, w) plane
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = oi[None, None] * stride + local // k
    cols = oj[None, None] * stride + local % k
    idx = (rows * w + cols).astype(np.int64)
    return y, idx


def maxpool2d_backward(gy: np.ndarray, idx: np.ndarray, input_hw: tuple[int, int]) -> np.ndarray:
    """Scatter gy back to the argmax positions (adjoint of the gather below)."""
    b, c, oh, ow = gy.shape
    h, w = input_hw
    gx = np.zeros((b, c, h * w))
    np.add.at(
        gx.reshape(b * c, h * w),
        (np.repeat(np.arange(b * c), oh * ow), idx.reshape(b * c, oh * ow).ravel()),
        gy.reshape(b * c, oh * ow).ravel(),
    )
    return gx.reshape(b, c, h, w)


def maxpool2d_gather(u: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Gather u at the recorded argmax positions: adjoint of maxpool2d_backward."""
    b, c, oh, ow = idx.shape
    flat = u.reshape(b * c, -1)
    out = flat[np.arange(b * c)[:, None], idx.reshape(b * c, oh * ow)]
    return out.reshape(b, c, oh, ow)
