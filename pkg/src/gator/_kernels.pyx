# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for NCHW float64 tensors.

Column layout is [C*kh*kw, N*Ho*Wo] so a convolution is one GEMM.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad,
           double pad_value=0.0):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t p = ho * wo
    out = np.empty((c * kh * kw, n * p), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, row, base
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for b in range(n):
                    base = b * p
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            for ox in range(wo):
                                cols[row, base + oy * wo + ox] = pad_value
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                cols[row, base + oy * wo + ox] = pad_value
                            else:
                                cols[row, base + oy * wo + ox] = x[b, ch, iy, ix]
    return out


def col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t p = ho * wo
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, base
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for b in range(n):
                    base = b * p
                    for oy in range(ho):
                        for ox in range(wo):
                            dx[b, ch, oy * stride + i, ox * stride + j] += cols[row, base + oy * wo + ox]
    if pad == 0:
        return out
    return np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w])
