# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (im2col/col2im and depth-wise conv).

Mirrors ``_kernels_py`` exactly; loops run serially so results do not depend
on thread count.
"""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline object _dtype(real dummy):
    if real is float:
        return np.float32
    return np.float64


def im2col(const real[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t n, ch, i, j, y, x, row, base
    out = np.empty((b, c * kh * kw, ho * wo), dtype=_dtype(<real>0))
    cdef real[:, :, ::1] o = out
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(ho):
                        base = y * wo
                        for x in range(wo):
                            o[n, row, base + x] = xp[n, ch, y * stride + i, x * stride + j]
    return out


def col2im(const real[:, :, ::1] cols, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t n, ch, i, j, y, x, row, base
    out = np.zeros((b, c, hp, wp), dtype=_dtype(<real>0))
    cdef real[:, :, :, ::1] o = out
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(ho):
                        base = y * wo
                        for x in range(wo):
                            o[n, ch, y * stride + i, x * stride + j] += cols[n, row, base + x]
    return out


def dwconv_forward(const real[:, :, :, ::1] xp, const real[:, :, :, ::1] w, Py_ssize_t stride,
                   Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t n, ch, i, j, y, x
    cdef real wv
    out = np.zeros((b, c, ho, wo), dtype=_dtype(<real>0))
    cdef real[:, :, :, ::1] o = out
    # tap-outer ordering matches the numpy fallback's accumulation order
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, 0, i, j]
                    for y in range(ho):
                        for x in range(wo):
                            o[n, ch, y, x] += xp[n, ch, y * stride + i, x * stride + j] * wv
    return out


def dwconv_backward(const real[:, :, :, ::1] g, const real[:, :, :, ::1] xp, const real[:, :, :, ::1] w,
                    Py_ssize_t stride):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t n, ch, i, j, y, x
    cdef real wv, gv, acc
    gx = np.zeros((b, c, xp.shape[2], xp.shape[3]), dtype=_dtype(<real>0))
    gw = np.zeros((c, 1, kh, kw), dtype=_dtype(<real>0))
    cdef real[:, :, :, ::1] gxv = gx
    cdef real[:, :, :, ::1] gwv = gw
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                wv = w[ch, 0, i, j]
                acc = 0
                for n in range(b):
                    for y in range(ho):
                        for x in range(wo):
                            gv = g[n, ch, y, x]
                            acc = acc + gv * xp[n, ch, y * stride + i, x * stride + j]
                            gxv[n, ch, y * stride + i, x * stride + j] += gv * wv
                gwv[ch, 0, i, j] = acc
    return gx, gw
