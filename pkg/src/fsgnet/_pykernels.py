"""Pure numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ckernels`` extension. Used
when the extension is not built or ``FSGNET_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (n, c, oh, ow, kh, kw) -> rows (n, oh, ow), cols (c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, xp_shape, kh, kw, stride):
    n, c, hp, wp = xp_shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    g = cols.reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


def depthwise_forward(xp, w, k):
    n, c, hp, wp = xp.shape
    oh, ow = hp - k + 1, wp - k + 1
    y = np.zeros((n, c, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            y += w[:, i * k + j][None, :, None, None] * xp[:, :, i:i + oh, j:j + ow]
    return y


def depthwise_backward(xp, w, dy, k):
    oh, ow = dy.shape[2], dy.shape[3]
    dx = np.zeros_like(xp)
    dw = np.empty((xp.shape[1], k * k), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i:i + oh, j:j + ow]
            dw[:, i * k + j] = np.einsum("nchw,nchw->c", dy, win)
            dx[:, :, i:i + oh, j:j + ow] += w[:, i * k + j][None, :, None, None] * dy
    return dx, dw


def maxpool_forward(x, k, stride):
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, k * k)
    local = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + local // k
    cols = np.arange(ow)[None, :] * stride + local % k
    return np.ascontiguousarray(y), (rows * w + cols).astype(np.int64)


def maxpool_backward(dy, arg, x_shape):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    flat_arg = arg.reshape(n, c, -1)
    flat_dy = dy.reshape(n, c, -1)
    # np.add.at handles overlapping windows that share an argmax
    bi, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dx, (bi[..., None], ci[..., None], flat_arg), flat_dy)
    return dx.reshape(x_shape)


def fft_rows(a, rev, tw):
    """In-place radix-2 DFT of every row; vectorized over rows."""
    rows, n = a.shape
    x = a[:, rev]
    half = 1
    while half < n:
        w = tw[:: n // (2 * half)][:half]
        blocks = x.reshape(rows, n // (2 * half), 2, half)
        even = blocks[:, :, 0, :].copy()
        odd = blocks[:, :, 1, :] * w
        blocks[:, :, 0, :] = even + odd
        blocks[:, :, 1, :] = even - odd
        half *= 2
    a[...] = x
