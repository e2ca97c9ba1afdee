# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im; same column layout as ``_kernels_py``."""
import numpy as np


def im2col(const double[:, :, :, ::1] xp, int k, int stride, int dilation, int out_h, int out_w):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ncols = n * out_h * out_w
    cols = np.empty((c * k * k, ncols), dtype=np.float64)
    cdef double[:, ::1] o = cols
    cdef Py_ssize_t ci, i, j, b, y, x, row, col, iy, jx
    with nogil:
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    iy = i * dilation
                    jx = j * dilation
                    col = 0
                    for b in range(n):
                        for y in range(out_h):
                            for x in range(out_w):
                                o[row, col] = xp[b, ci, y * stride + iy, x * stride + jx]
                                col += 1
    return cols


def col2im(const double[:, ::1] cols, int n, int c, int hp, int wp, int k, int stride,
           int dilation, int out_h, int out_w):
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t ci, i, j, b, y, x, row, col, iy, jx
    with nogil:
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ci * k + i) * k + j
                    iy = i * dilation
                    jx = j * dilation
                    col = 0
                    for b in range(n):
                        for y in range(out_h):
                            for x in range(out_w):
                                o[b, ci, y * stride + iy, x * stride + jx] += cols[row, col]
                                col += 1
    return out
