# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels (float64, NCHW).

Same contracts as kernels.numpy_ops; selected at import when built.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "cython"


def _out_dim(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, Py_ssize_t stride=1, Py_ssize_t pad=0):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], ci = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t co = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    if ci != wv.shape[1]:
        raise ValueError(f"conv2d: input has {ci} channels, weight expects {wv.shape[1]}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        # guard before the division: C-truncated // would round -1 up to 0
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} (pad={pad})")
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} (pad={pad})")
    out = np.zeros((b, co, oh, ow))
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t n, o, c, i, j, p, q, ii, jj
    cdef double acc
    with nogil:
        for n in range(b):
            for o in range(co):
                for i in range(oh):
                    for j in range(ow):
                        acc = 0.0
                        for c in range(ci):
                            for p in range(kh):
                                ii = i * stride + p - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for q in range(kw):
                                    jj = j * stride + q - pad
                                    if jj < 0 or jj >= wd:
                                        continue
                                    acc += xv[n, c, ii, jj] * wv[o, c, p, q]
                        y[n, o, i, j] = acc
    return out


def conv2d_backward_data(w, gy, input_hw, Py_ssize_t stride=1, Py_ssize_t pad=0):
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t co = wv.shape[0], ci = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t b = gv.shape[0], oh = gv.shape[2], ow = gv.shape[3]
    if gv.shape[1] != co:
        raise ValueError(f"conv2d_backward_data: gradient has {gv.shape[1]} channels, weight has {co}")
    cdef Py_ssize_t h = input_hw[0], wd = input_hw[1]
    out = np.zeros((b, ci, h, wd))
    cdef double[:, :, :, ::1] gx = out
    cdef Py_ssize_t n, o, c, i, j, p, q, ii, jj
    cdef double g
    with nogil:
        for n in range(b):
            for o in range(co):
                for i in range(oh):
                    for j in range(ow):
                        g = gv[n, o, i, j]
                        if g == 0.0:
                            continue
                        for c in range(ci):
                            for p in range(kh):
                                ii = i * stride + p - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for q in range(kw):
                                    jj = j * stride + q - pad
                                    if jj < 0 or jj >= wd:
                                        continue
                                    gx[n, c, ii, jj] += g * wv[o, c, p, q]
    return out


def conv2d_backward_weight(x, gy, kernel_hw, Py_ssize_t stride=1, Py_ssize_t pad=0):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], ci = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef Py_ssize_t co = gv.shape[1], oh = gv.shape[2], ow = gv.shape[3]
    if gv.shape[0] != b:
        raise ValueError(f"conv2d_backward_weight: batch mismatch {b} vs {gv.shape[0]}")
    cdef Py_ssize_t kh = kernel_hw[0], kw = kernel_hw[1]
    out = np.zeros((co, ci, kh, kw))
    cdef double[:, :, :, ::1] gw = out
    cdef Py_ssize_t n, o, c, i, j, p, q, ii, jj
    cdef double g
    with nogil:
        for n in range(b):
            for o in range(co):
                for i in range(oh):
                    for j in range(ow):
                        g = gv[n, o, i, j]
                        if g == 0.0:
                            continue
                        for c in range(ci):
                            for p in range(kh):
                                ii = i * stride + p - pad
                                if ii < 0 or ii >= h:
                                    continue
                                for q in range(kw):
                                    jj = j * stride + q - pad
                                    if jj < 0 or jj >= wd:
                                        continue
                                    gw[o, c, p, q] += g * xv[n, c, ii, jj]
    return out


def maxpool2d_forward(x, Py_ssize_t k, Py_ssize_t stride):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    if k > h or k > w:
        # guard before the division: C-truncated // would round -1 up to 0
        raise ValueError(f"maxpool2d: window {k} does not fit input {h}x{w}")
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"maxpool2d: window {k} does not fit input {h}x{w}")
    out = np.empty((b, c, oh, ow))
    idx_out = np.empty((b, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] y = out
    cdef long long[:, :, :, ::1] idx = idx_out
    cdef Py_ssize_t n, ch, i, j, p, q, ii, jj, best_pos
    cdef double best, v
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        best = xv[n, ch, i * stride, j * stride]
                        best_pos = (i * stride) * w + (j * stride)
                        for p in range(k):
                            ii = i * stride + p
                            for q in range(k):
                                jj = j * stride + q
                                v = xv[n, ch, ii, jj]
                                if v > best:
                                    best = v
                                    best_pos = ii * w + jj
                        y[n, ch, i, j] = best
                        idx[n, ch, i, j] = best_pos
    return out, idx_out


def maxpool2d_backward(gy, idx, input_hw):
    cdef double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef long long[:, :, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t b = gv.shape[0], c = gv.shape[1], oh = gv.shape[2], ow = gv.shape[3]
    cdef Py_ssize_t h = input_hw[0], w = input_hw[1]
    out = np.zeros((b, c, h, w))
    cdef double[:, :, :, ::1] gx = out
    cdef Py_ssize_t n, ch, i, j, pos
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        pos = iv[n, ch, i, j]
                        gx[n, ch, pos // w, pos % w] += gv[n, ch, i, j]
    return out


def maxpool2d_gather(u, idx):
    cdef double[:, :, :, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef long long[:, :, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t b = iv.shape[0], c = iv.shape[1], oh = iv.shape[2], ow = iv.shape[3]
    cdef Py_ssize_t w = uv.shape[3]
    out = np.empty((b, c, oh, ow))
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t n, ch, i, j, pos
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        pos = iv[n, ch, i, j]
                        y[n, ch, i, j] = uv[n, ch, pos // w, pos % w]
    return out
