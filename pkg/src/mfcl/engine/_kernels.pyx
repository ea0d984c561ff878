# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im and nearest-upsample kernels.

Same layout and accumulation order as ``_fallback``.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t width = c * k * k
    out = np.zeros((n * h * w, width), dtype=np.float64)
    cdef double[:, ::1] mat = out
    cdef Py_ssize_t b, ch, i, j, r, s, rr, ss, row, col
    with nogil:
        for b in range(n):
            for r in range(h):
                for s in range(w):
                    row = (b * h + r) * w + s
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            rr = r + i - pad
                            for j in range(k):
                                ss = s + j - pad
                                if rr >= 0 and rr < h and ss >= 0 and ss < w:
                                    mat[row, col] = x[b, ch, rr, ss]
                                col = col + 1
    return out


def col2im(double[:, ::1] mat, shape, Py_ssize_t k, Py_ssize_t pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j, r, s, rr, ss, row, col
    with nogil:
        for b in range(n):
            for r in range(h):
                for s in range(w):
                    row = (b * h + r) * w + s
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            rr = r + i - pad
                            for j in range(k):
                                ss = s + j - pad
                                if rr >= 0 and rr < h and ss >= 0 and ss < w:
                                    dx[b, ch, rr, ss] += mat[row, col]
                                col = col + 1
    return out


def upsample2x(double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    out = np.empty((n, c, 2 * h, 2 * w), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ch, r, s
    cdef double v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for r in range(h):
                    for s in range(w):
                        v = x[b, ch, r, s]
                        y[b, ch, 2 * r, 2 * s] = v
                        y[b, ch, 2 * r, 2 * s + 1] = v
                        y[b, ch, 2 * r + 1, 2 * s] = v
                        y[b, ch, 2 * r + 1, 2 * s + 1] = v
    return out


def upsample2x_backward(double[:, :, :, ::1] dy):
    cdef Py_ssize_t n = dy.shape[0], c = dy.shape[1]
    cdef Py_ssize_t h = dy.shape[2] // 2, w = dy.shape[3] // 2
    out = np.empty((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, r, s
    with nogil:
        for b in range(n):
            for ch in range(c):
                for r in range(h):
                    for s in range(w):
                        dx[b, ch, r, s] = (
                            (dy[b, ch, 2 * r, 2 * s] + dy[b, ch, 2 * r, 2 * s + 1])
                            + (dy[b, ch, 2 * r + 1, 2 * s] + dy[b, ch, 2 * r + 1, 2 * s + 1])
                        )
    return out
