# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv3x3 / maxpool2 kernels (NCHW, float64).

Loop orders are fixed so results do not depend on ``num_threads``: work is
split over batch items (forward, input gradient) or output channels (weight
gradient), never across a reduction.
"""

import numpy as np
from cython.parallel cimport prange


cdef void _conv_fwd_one(const double* xp, const double* w, const double* b,
                        double* y, Py_ssize_t C, Py_ssize_t O,
                        Py_ssize_t H, Py_ssize_t W) noexcept nogil:
    # xp is one zero-padded item (C, H+2, W+2). y is written with the padded
    # row pitch W + 2; the two trailing columns of every row are scratch.
    cdef Py_ssize_t o, c, t
    cdef Py_ssize_t Wp = W + 2, HWp = (H + 2) * (W + 2), L = H * (W + 2) - 2
    cdef double w0, w1, w2, w3, w4, w5, w6, w7, w8
    cdef double* yo
    cdef const double* x0
    cdef const double* x1
    cdef const double* x2
    cdef const double* wk
    for o in range(O):
        yo = y + o * H * Wp
        for t in range(H * Wp):
            yo[t] = b[o]
        for c in range(C):
            wk = w + (o * C + c) * 9
            w0 = wk[0]
            w1 = wk[1]
            w2 = wk[2]
            w3 = wk[3]
            w4 = wk[4]
            w5 = wk[5]
            w6 = wk[6]
            w7 = wk[7]
            w8 = wk[8]
            x0 = xp + c * HWp
            x1 = x0 + Wp
            x2 = x1 + Wp
            for t in range(L):
                yo[t] += (w0 * x0[t] + w1 * x0[t + 1] + w2 * x0[t + 2]
                          + w3 * x1[t] + w4 * x1[t + 1] + w5 * x1[t + 2]
                          + w6 * x2[t] + w7 * x2[t + 1] + w8 * x2[t + 2])


cdef void _conv_dw_one(const double* xp, const double* gy, double* dw,
                       Py_ssize_t N, Py_ssize_t C, Py_ssize_t O,
                       Py_ssize_t H, Py_ssize_t W, Py_ssize_t o) noexcept nogil:
    cdef Py_ssize_t n, c, t
    cdef Py_ssize_t Wp = W + 2, HWp = (H + 2) * (W + 2), L = H * (W + 2) - 2
    cdef double a0, a1, a2, a3, a4, a5, a6, a7, a8, g
    cdef const double* go
    cdef const double* x0
    cdef const double* x1
    cdef const double* x2
    cdef double* d
    for n in range(N):
        go = gy + (n * O + o) * H * Wp
        for c in range(C):
            x0 = xp + (n * C + c) * HWp
            x1 = x0 + Wp
            x2 = x1 + Wp
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            a3 = 0.0
            a4 = 0.0
            a5 = 0.0
            a6 = 0.0
            a7 = 0.0
            a8 = 0.0
            for t in range(L):
                g = go[t]
                a0 += g * x0[t]
                a1 += g * x0[t + 1]
                a2 += g * x0[t + 2]
                a3 += g * x1[t]
                a4 += g * x1[t + 1]
                a5 += g * x1[t + 2]
                a6 += g * x2[t]
                a7 += g * x2[t + 1]
                a8 += g * x2[t + 2]
            d = dw + (o * C + c) * 9
            d[0] += a0
            d[1] += a1
            d[2] += a2
            d[3] += a3
            d[4] += a4
            d[5] += a5
            d[6] += a6
            d[7] += a7
            d[8] += a8


def _padded(double[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    xp = np.zeros((N, C, H + 2, W + 2))
    xp[:, :, 1:H + 1, 1:W + 1] = x
    return xp


def _conv_padded(xp_arr, w_arr, b_arr, int num_threads):
    cdef double[:, :, :, ::1] xp = xp_arr
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w_arr, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b_arr, dtype=np.float64)
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1], H = xp.shape[2] - 2, W = xp.shape[3] - 2
    cdef Py_ssize_t O = wv.shape[0]
    if wv.shape[1] != C:
        raise ValueError("weight/input channel mismatch")
    if N == 0:
        return np.empty((N, O, H, W))
    y = np.empty((N, O, H, W + 2))
    cdef double[:, :, :, ::1] yv = y
    cdef Py_ssize_t n
    for n in prange(N, nogil=True, num_threads=num_threads, schedule="static"):
        _conv_fwd_one(&xp[n, 0, 0, 0], &wv[0, 0, 0, 0], &bv[0], &yv[n, 0, 0, 0], C, O, H, W)
    return np.ascontiguousarray(y[:, :, :, :W])


def conv3x3_forward(x, w, b, int num_threads=1):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _conv_padded(_padded(x), w, b, num_threads)


def conv3x3_backward(x, w, gy, need_dx=True, int num_threads=1):
    """Return (dw, db, dx); dx is None when ``need_dx`` is false."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, :, ::1] xp = _padded(x)
    gpitch = np.zeros(gy.shape[:3] + (gy.shape[3] + 2,))
    gpitch[:, :, :, :gy.shape[3]] = gy
    cdef double[:, :, :, ::1] gv = gpitch
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0]
    dw = np.zeros((O, C, 3, 3))
    cdef double[:, :, :, ::1] dwv = dw
    db = gy.sum(axis=(0, 2, 3))
    cdef Py_ssize_t o
    if N == 0:
        return dw, db, (np.zeros((0, C, H, W)) if need_dx else None)
    for o in prange(O, nogil=True, num_threads=num_threads, schedule="static"):
        _conv_dw_one(&xp[0, 0, 0, 0], &gv[0, 0, 0, 0], &dwv[0, 0, 0, 0], N, C, O, H, W, o)
    if not need_dx:
        return dw, db, None
    # input gradient = full correlation of gy with the flipped, transposed kernel
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = _conv_padded(_padded(gy), w_flip, np.zeros(C), num_threads)
    return dw, db, dx


def maxpool2_forward(x, int num_threads=1):
    """2x2/stride-2 max pooling (floor). Returns (y, argmax in 0..3)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] xv = x
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t H2 = H // 2, W2 = W // 2
    y = np.empty((N, C, H2, W2))
    idx = np.empty((N, C, H2, W2), dtype=np.int8)
    cdef double[:, :, :, ::1] yv = y
    cdef signed char[:, :, :, ::1] iv = idx
    cdef Py_ssize_t n, c, i, j
    cdef double best, v
    cdef signed char k
    for n in prange(N, nogil=True, num_threads=num_threads, schedule="static"):
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    best = xv[n, c, 2 * i, 2 * j]
                    k = 0
                    v = xv[n, c, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = xv[n, c, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        k = 2
                    v = xv[n, c, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 3
                    yv[n, c, i, j] = best
                    iv[n, c, i, j] = k
    return y, idx


def maxpool2_backward(gy, idx, in_shape, int num_threads=1):
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    cdef double[:, :, :, ::1] gv = gy
    cdef const signed char[:, :, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int8)
    dx = np.zeros(tuple(in_shape))
    cdef double[:, :, :, ::1] dxv = dx
    cdef Py_ssize_t N = gy.shape[0], C = gy.shape[1], H2 = gy.shape[2], W2 = gy.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef signed char k
    for n in prange(N, nogil=True, num_threads=num_threads, schedule="static"):
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    k = iv[n, c, i, j]
                    dxv[n, c, 2 * i + k // 2, 2 * j + k % 2] = gv[n, c, i, j]
    return dx
