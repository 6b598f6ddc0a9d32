# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution/pooling inner loops (float32 and float64)."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c * k * k, ho * wo), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, y, x, row, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        for y in range(ho):
                            base = y * wo
                            for x in range(wo):
                                cols[b, row, base + x] = xp[b, ch, y * stride + i, x * stride + j]
    return out


def col2im(real[:, :, ::1] cols, tuple shape, Py_ssize_t k, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = shape[0], c = shape[1], hp = shape[2], wp = shape[3]
    dtype = np.float32 if real is float else np.float64
    res = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = res
    cdef Py_ssize_t b, ch, i, j, y, x, row, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        for y in range(ho):
                            base = y * wo
                            for x in range(wo):
                                out[b, ch, y * stride + i, x * stride + j] += cols[b, row, base + x]
    return res


def maxpool_forward(real[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride,
                    Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    res = np.empty((n, c, ho, wo), dtype=dtype)
    ires = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef real[:, :, :, ::1] out = res
    cdef long long[:, :, :, ::1] idx = ires
    cdef Py_ssize_t b, ch, y, xx, i, j, r, s, best_i
    cdef real best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        r = y * stride
                        s = xx * stride
                        best = x[b, ch, r, s]
                        best_i = r * w + s
                        for i in range(k):
                            for j in range(k):
                                v = x[b, ch, r + i, s + j]
                                # strict > keeps the first maximum in row-major order
                                if v > best:
                                    best = v
                                    best_i = (r + i) * w + s + j
                        out[b, ch, y, xx] = best
                        idx[b, ch, y, xx] = best_i
    return res, ires


def maxpool_backward(real[:, :, :, ::1] g, long long[:, :, :, ::1] idx, tuple shape):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    res = np.zeros((n, c, h * w), dtype=dtype)
    cdef real[:, :, ::1] out = res
    cdef Py_ssize_t b, ch, y, xx
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        out[b, ch, idx[b, ch, y, xx]] += g[b, ch, y, xx]
    return res.reshape(shape)
