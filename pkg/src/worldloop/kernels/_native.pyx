# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel lane: conv patch gather/scatter inner loops.

Accumulation order in col2im matches the numpy lane (ascending ki, kj per
output element), keeping the two lanes bit-identical in float64.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv_out_size(int n, int k, int stride, int pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(cnp.ndarray[cnp.float64_t, ndim=4] x, int kh, int kw, int stride, int pad):
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, ho * wo, c * kh * kw), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef int b, oy, ox, ci, ki, kj, y, xx, row, col
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = oy * wo + ox
                    for ci in range(c):
                        for ki in range(kh):
                            y = oy * stride + ki - pad
                            if y < 0 or y >= h:
                                continue
                            for kj in range(kw):
                                xx = ox * stride + kj - pad
                                if xx < 0 or xx >= w:
                                    continue
                                col = (ci * kh + ki) * kw + kj
                                out[b, row, col] = xv[b, ci, y, xx]
    return out_arr


def col2im(cnp.ndarray[cnp.float64_t, ndim=3] cols, int kh, int kw, int stride,
           int pad, int h, int w):
    cdef int n = cols.shape[0], k = cols.shape[2]
    cdef int c = k // (kh * kw)
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, ::1] cv = np.ascontiguousarray(cols)
    cdef int b, oy, ox, ci, ki, kj, y, xx, row, col
    with nogil:
        for b in range(n):
            for ki in range(kh):
                for kj in range(kw):
                    for ci in range(c):
                        col = (ci * kh + ki) * kw + kj
                        for oy in range(ho):
                            y = oy * stride + ki - pad
                            if y < 0 or y >= h:
                                continue
                            for ox in range(wo):
                                xx = ox * stride + kj - pad
                                if xx < 0 or xx >= w:
                                    continue
                                row = oy * wo + ox
                                out[b, ci, y, xx] += cv[b, row, col]
    return out_arr
