"""Independent reference implementations used by the tests."""
import numpy as np


def conv_loops(x, w, bias, stride, pad):
    """Nested-loop cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    l, r, t, b = pad
    xp = np.zeros((n, c, h + t + b, wd + l + r))
    xp[:, :, t:t + h, l:l + wd] = x
    oh = (h + t + b - kh) // stride + 1
    ow = (wd + l + r - kw) // stride + 1
    y = np.zeros((n, oc, oh, ow))
    for bi in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if bias is None else bias[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, ci, u, v] * xp[bi, ci, i * stride + u, j * stride + v]
                    y[bi, o, i, j] = acc
    return y


def dft2_direct(plane):
    h, w = plane.shape
    out = np.zeros((h, w), dtype=complex)
    for k in range(h):
        for l in range(w):
            s = 0j
            for m in range(h):
                for n in range(w):
                    s += plane[m, n] * np.exp(-2j * np.pi * (k * m / h + l * n / w))
            out[k, l] = s
    return out
