"""Pure numpy versions of the hot kernels.

``im2col`` returns the patch matrix of shape ``(N*H*W, C*k*k)``: row
``(n, r, s)``, column ``(c, i, j)``. ``col2im`` scatters it back, adding
the contributions to each pixel in the same order as the compiled kernel,
so both backends agree bitwise.
"""
import numpy as np


def im2col(x, k, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, h, w, c, k, k), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + h, j:j + w].transpose(0, 2, 3, 1)
    return cols.reshape(n * h * w, c * k * k)


def col2im(mat, shape, k, pad):
    n, c, h, w = shape
    cols = mat.reshape(n, h, w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    # descending offsets == ascending source pixel, the compiled loop order
    for i in reversed(range(k)):
        for j in reversed(range(k)):
            dxp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])


def upsample2x(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(dy):
    # fixed left-to-right order so the compiled kernel can match bitwise
    return (dy[:, :, 0::2, 0::2] + dy[:, :, 0::2, 1::2]) + (
        dy[:, :, 1::2, 0::2] + dy[:, :, 1::2, 1::2])
