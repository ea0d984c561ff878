"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback. Set ``MFCL_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("MFCL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback


def im2col(x, k, pad):
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), k, pad)


def col2im(mat, shape, k, pad):
    return _impl.col2im(np.ascontiguousarray(mat, dtype=np.float64), tuple(shape), k, pad)


def upsample2x(x):
    return _impl.upsample2x(np.ascontiguousarray(x, dtype=np.float64))


def upsample2x_backward(dy):
    return _impl.upsample2x_backward(np.ascontiguousarray(dy, dtype=np.float64))
