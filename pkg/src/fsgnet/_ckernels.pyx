# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the tensor core.

Every function here has a numpy twin in ``_pykernels`` with the same
signature and results; ``fsgnet.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1
    cdef Py_ssize_t b, ci, i, j, y, x, row, col, ncol = c * kh * kw
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n * oh * ow, ncol), dtype=dtype)
    cdef real[:, ::1] cols = out
    for b in range(n):
        for y in range(oh):
            for x in range(ow):
                row = (b * oh + y) * ow + x
                col = 0
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[row, col] = xp[b, ci, y * stride + i, x * stride + j]
                            col += 1
    return out


def col2im(real[:, ::1] cols, tuple xp_shape, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp_shape[0], c = xp_shape[1], hp = xp_shape[2], wp = xp_shape[3]
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1
    cdef Py_ssize_t b, ci, i, j, y, x, row, col
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    for b in range(n):
        for y in range(oh):
            for x in range(ow):
                row = (b * oh + y) * ow + x
                col = 0
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            dx[b, ci, y * stride + i, x * stride + j] += cols[row, col]
                            col += 1
    return out


def depthwise_forward(real[:, :, :, ::1] xp, real[:, ::1] w, int k):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t oh = xp.shape[2] - k + 1, ow = xp.shape[3] - k + 1
    cdef Py_ssize_t b, ci, i, j, y, x
    cdef real wv
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, oh, ow), dtype=dtype)
    cdef real[:, :, :, ::1] yv = out
    # taps outermost so the inner loop runs over contiguous x
    for b in range(n):
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    wv = w[ci, i * k + j]
                    for y in range(oh):
                        for x in range(ow):
                            yv[b, ci, y, x] += wv * xp[b, ci, y + i, x + j]
    return out


def depthwise_backward(real[:, :, :, ::1] xp, real[:, ::1] w, real[:, :, :, ::1] dy, int k):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t b, ci, i, j, y, x
    cdef real wv
    cdef double acc
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, c, xp.shape[2], xp.shape[3]), dtype=dtype)
    dw_arr = np.zeros((c, k * k), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef real[:, ::1] dw = dw_arr
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                wv = w[ci, i * k + j]
                acc = 0
                for b in range(n):
                    for y in range(oh):
                        for x in range(ow):
                            acc = acc + dy[b, ci, y, x] * xp[b, ci, y + i, x + j]
                            dx[b, ci, y + i, x + j] += wv * dy[b, ci, y, x]
                dw[ci, i * k + j] = <real> acc
    return dx_arr, dw_arr


def maxpool_forward(real[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1, ow = (w - k) // stride + 1
    cdef Py_ssize_t b, ci, i, j, y, xx, best_idx, idx
    cdef real best, v
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, oh, ow), dtype=dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] yv = out
    cdef long long[:, :, :, ::1] av = arg
    for b in range(n):
        for ci in range(c):
            for y in range(oh):
                for xx in range(ow):
                    best_idx = (y * stride) * w + xx * stride
                    best = x[b, ci, y * stride, xx * stride]
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ci, y * stride + i, xx * stride + j]
                            if v > best:
                                best = v
                                best_idx = (y * stride + i) * w + xx * stride + j
                    yv[b, ci, y, xx] = best
                    av[b, ci, y, xx] = best_idx
    return out, arg


def maxpool_backward(real[:, :, :, ::1] dy, long long[:, :, :, ::1] arg, tuple x_shape):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t b, ci, y, xx, idx
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    for b in range(n):
        for ci in range(c):
            for y in range(oh):
                for xx in range(ow):
                    idx = arg[b, ci, y, xx]
                    dx[b, ci, idx // w, idx % w] += dy[b, ci, y, xx]
    return out


def fft_rows(double complex[:, ::1] a, long long[::1] rev, double complex[::1] tw):
    """In-place unnormalized radix-2 DFT of every row of ``a``.

    ``rev`` is the bit-reversal permutation and ``tw`` holds the n/2
    twiddles exp(-+2*pi*i*k/n) of the full-length transform.
    """
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t r, i, j, k, half, step, base, p, q
    cdef double tr, ti, wr, wi, ur, ui
    cdef double *row
    # explicit re/im arithmetic: C complex multiply goes through the
    # inf/nan-safe __muldc3 helper, which dominates the butterfly
    cdef const double *twd = <const double *> &tw[0] if tw.shape[0] else NULL
    for r in range(rows):
        row = <double *> &a[r, 0]
        for i in range(n):
            j = rev[i]
            if j > i:
                tr = row[2 * i]
                ti = row[2 * i + 1]
                row[2 * i] = row[2 * j]
                row[2 * i + 1] = row[2 * j + 1]
                row[2 * j] = tr
                row[2 * j + 1] = ti
        half = 1
        while half < n:
            step = n // (2 * half)
            base = 0
            while base < n:
                for k in range(half):
                    wr = twd[2 * k * step]
                    wi = twd[2 * k * step + 1]
                    p = 2 * (base + k)
                    q = p + 2 * half
                    tr = wr * row[q] - wi * row[q + 1]
                    ti = wr * row[q + 1] + wi * row[q]
                    ur = row[p]
                    ui = row[p + 1]
                    row[p] = ur + tr
                    row[p + 1] = ui + ti
                    row[q] = ur - tr
                    row[q + 1] = ui - ti
                base += 2 * half
            half *= 2
