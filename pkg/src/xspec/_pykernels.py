"""Pure-numpy kernels for the convolutional embedding towers.

All arrays are float64, batch-first NCHW. The compiled module ``_ckernels``
exposes the same functions with the same semantics; see ``xspec._kernels``
for backend selection.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    return cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv3x3_forward(x, w, b, num_threads=1):
    n, c, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col(x)
    y = cols @ w.reshape(o, c * 9).T + b
    return np.ascontiguousarray(y.reshape(n, h, wd, o).transpose(0, 3, 1, 2))


def conv3x3_backward(x, w, gy, need_dx=True, num_threads=1):
    """Return (dw, db, dx); dx is None when ``need_dx`` is false."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col(x)
    gmat = gy.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
    dw = (gmat.T @ cols).reshape(o, c, 3, 3)
    db = gy.sum(axis=(0, 2, 3))
    if not need_dx:
        return dw, db, None
    dcols = (gmat @ w.reshape(o, c * 9)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky:ky + h, kx:kx + wd] += dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return dw, db, np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])


def maxpool2_forward(x, num_threads=1):
    """2x2/stride-2 max pooling (floor). Returns (y, argmax in 0..3)."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx.astype(np.int8)


def maxpool2_backward(gy, idx, in_shape, num_threads=1):
    n, c, h, w = in_shape
    h2, w2 = gy.shape[2], gy.shape[3]
    g4 = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(g4, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    g4 = g4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    dx = np.zeros(in_shape)
    dx[:, :, :2 * h2, :2 * w2] = g4
    return dx
