"""Hot convolution kernels with a compiled core and a numpy fallback.

The compiled module ``gator._kernels`` is used when importable, unless the
environment variable ``GATOR_PURE_PYTHON`` is set to a non-empty value.
Both backends accumulate in the same order and agree bit-for-bit.
"""
from __future__ import annotations

import os

import numpy as np


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col_numpy(x, kh, kw, stride, pad, pad_value=0.0):
    """Unfold ``x`` [N,C,H,W] into columns [C*kh*kw, N*Ho*Wo]."""
    n, c, h, w = x.shape
    ho = out_size(h, kh, stride, pad)
    wo = out_size(w, kw, stride, pad)
    if pad:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), pad_value, dtype=np.float64)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.float64)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im_numpy(cols, n, c, h, w, kh, kw, stride, pad):
    """Adjoint of :func:`im2col_numpy`: scatter-add [C*kh*kw, N*Ho*Wo] back to [N,C,H,W]."""
    ho = out_size(h, kh, stride, pad)
    wo = out_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad == 0:
        return dx
    return np.ascontiguousarray(dx[:, :, pad:pad + h, pad:pad + w])


try:
    if os.environ.get("GATOR_PURE_PYTHON"):
        raise ImportError("pure-python kernels requested")
    from gator import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"


def im2col(x, kh, kw, stride, pad, pad_value=0.0):
    if _compiled is None:
        return im2col_numpy(x, kh, kw, stride, pad, pad_value)
    return _compiled.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad, pad_value)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    if _compiled is None:
        return col2im_numpy(cols, n, c, h, w, kh, kw, stride, pad)
    return _compiled.col2im(np.ascontiguousarray(cols, dtype=np.float64), n, c, h, w, kh, kw, stride, pad)
