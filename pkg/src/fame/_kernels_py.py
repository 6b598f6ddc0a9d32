"""Pure-numpy implementations of the convolution/pooling inner loops.

Same signatures as the compiled ``_kernels`` extension; :mod:`fame.kernels`
picks one at import time.
"""

import numpy as np


def im2col(xp, k, stride, ho, wo):
    """Unfold a padded batch ``(N, C, Hp, Wp)`` into ``(N, C*k*k, ho*wo)``."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols, shape, k, stride, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back into ``shape``."""
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    c6 = cols.reshape(n, c, k, k, ho, wo)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += c6[:, :, i, j]
    return out


def maxpool_forward(x, k, stride, ho, wo):
    """Window max with flat argmax index (first maximum in row-major order)."""
    n, c, h, w = x.shape
    win = np.empty((n, c, ho, wo, k * k), dtype=x.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            win[..., i * k + j] = x[:, :, i:i + hs:stride, j:j + ws:stride]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[:, None] * stride + di
    colsidx = np.arange(wo)[None, :] * stride + dj
    idx = rows * w + colsidx
    return out, idx.astype(np.int64)


def maxpool_backward(g, idx, shape):
    n, c, h, w = shape
    out = np.zeros((n * c, h * w), dtype=g.dtype)
    flat_idx = idx.reshape(n * c, -1)
    gf = g.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), flat_idx.shape[1])
    np.add.at(out, (rows, flat_idx.ravel()), gf.ravel())
    return out.reshape(shape)
