"""Dense rank-4 tensors with tape-recorded reverse-mode differentiation.

Feature maps are ``(n, c, h, w)`` arrays. Ops record themselves on the
innermost active :class:`Tape` when any input requires a gradient; outside
a tape everything runs as plain numpy inference.
"""
from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import kernels

_state = {"dtype": np.float32, "check_finite": True}
_mac_counters: list = []


class NonFiniteError(FloatingPointError):
    pass


class FftResidueError(ValueError):
    pass


def get_dtype():
    return _state["dtype"]


def set_precision(dtype) -> None:
    """Switch the default float type (float32 canonical, float64 for checks)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state["dtype"] = dtype


@contextmanager
def precision(dtype):
    old = _state["dtype"]
    set_precision(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


class PadQuad(NamedTuple):
    left: int = 0
    right: int = 0
    top: int = 0
    bottom: int = 0

    @classmethod
    def same(cls, k: int) -> "PadQuad":
        p = k // 2
        return cls(p, p, p, p)


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class ComplexPair(NamedTuple):
    real: Tensor
    imag: Tensor


class Node(NamedTuple):
    op: str
    inputs: tuple
    outputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable ops; replayed in reverse by :meth:`backward`."""

    _stack: list = []

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.remove(self)
        return False

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def backward(self, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> None:
        backward(self, loss, params)


def active_tape() -> Optional[Tape]:
    return Tape._stack[-1] if Tape._stack else None


def _out(arr: np.ndarray, op: str) -> Tensor:
    if _state["check_finite"] and not math.isfinite(float(np.sum(arr))):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return Tensor._wrap(arr)


def _record(op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor], fn: Callable) -> None:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    tape.nodes.append(Node(op, tuple(inputs), tuple(outputs), fn))


def backward(tape: Tape, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> None:
    """Populate ``.grad`` of every tensor on ``tape`` that feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. Tensors in
    ``params`` that the loss does not reach get zero gradients and a warning.
    """
    if tape.consumed:
        raise RuntimeError("backward called twice on the same tape without reset()")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a single element, got shape {loss.shape}")
    tape.consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {id(loss): loss}
    for node in reversed(tape.nodes):
        gouts = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, gouts)]
        for o, g in zip(node.outputs, gouts):
            o.grad = g
            leaves.pop(id(o), None)
        for t, g in zip(node.inputs, node.backward(gouts)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + g if key in grads else g
            leaves[key] = t
    reached = set()
    for key, g in grads.items():
        t = leaves[key]
        t.grad = g.astype(t.data.dtype, copy=False) if t.grad is None else t.grad + g
        reached.add(key)
    if params is not None:
        missing = 0
        for p in params:
            if p.requires_grad and id(p) not in reached:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                missing += 1
        if missing:
            warnings.warn(f"{missing} parameter tensor(s) not reached by the loss; gradients left at zero",
                          RuntimeWarning, stacklevel=2)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = _out(a.data + b.data, "add")
    except ValueError as exc:
        if isinstance(exc, NonFiniteError):
            raise
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    _record("add", (a, b), (out,), lambda gs: (_unbroadcast(gs[0], a.shape), _unbroadcast(gs[0], b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = _out(a.data * b.data, "mul")
    except ValueError as exc:
        if isinstance(exc, NonFiniteError):
            raise
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    _record("mul", (a, b), (out,), lambda gs: (_unbroadcast(gs[0] * b.data, a.shape),
                                                _unbroadcast(gs[0] * a.data, b.shape)))
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _out(a.data * a.data.dtype.type(s), "scale")
    _record("scale", (a,), (out,), lambda gs: (gs[0] * a.data.dtype.type(s),))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _out(np.where(mask, x.data, x.data.dtype.type(0)), "relu")
    _record("relu", (x,), (out,), lambda gs: (gs[0] * mask,))
    return out


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    out = _out(s, "sigmoid")
    _record("sigmoid", (x,), (out,), lambda gs: (gs[0] * s * (1 - s),))
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a 1x1x1x1 tensor."""
    out = _out(np.sum(x.data, dtype=x.data.dtype).reshape(1, 1, 1, 1), "sum")
    _record("sum", (x,), (out,), lambda gs: (np.broadcast_to(gs[0].reshape(()), x.shape).copy(),))
    return out


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    ts = list(ts)
    base = ts[0].shape
    for t in ts[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {base} and {t.shape}")
    out = _out(np.concatenate([t.data for t in ts], axis=1), "concat")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def back(gs):
        return tuple(gs[0][:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    _record("concat", ts, (out,), back)
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = _out(np.ascontiguousarray(x.data[:, start:stop]), "slice")

    def back(gs):
        g = np.zeros_like(x.data)
        g[:, start:stop] = gs[0]
        return (g,)

    _record("slice", (x,), (out,), back)
    return out


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(slice_channels(x, start, start + s))
        start += s
    return out


def channel_reduce(x: Tensor, mode: str) -> Tensor:
    """Per-pixel max or mean across channels -> (n, 1, h, w)."""
    if mode == "max":
        idx = x.data.argmax(axis=1)[:, None]
        out = _out(np.take_along_axis(x.data, idx, axis=1), "channel_max")

        def back(gs):
            g = np.zeros_like(x.data)
            np.put_along_axis(g, idx, gs[0], axis=1)
            return (g,)
    elif mode == "avg":
        c = x.shape[1]
        out = _out(x.data.mean(axis=1, keepdims=True), "channel_mean")

        def back(gs):
            return (np.broadcast_to(gs[0] / c, x.shape).copy(),)
    else:
        raise ValueError(f"unknown reduce mode {mode!r}")
    _record("channel_" + mode, (x,), (out,), back)
    return out


# ----------------------------------------------------------------- convolution

def _count(macs: float) -> None:
    for c in _mac_counters:
        c["macs"] += macs


@contextmanager
def count_macs():
    """Accumulate multiply-accumulate counts of convolutions and FFTs."""
    counter = {"macs": 0}
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _pad(x: np.ndarray, pad: PadQuad) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad.top, pad.bottom), (pad.left, pad.right)))


def _unpad(g: np.ndarray, pad: PadQuad) -> np.ndarray:
    if not any(pad):
        return g
    h, w = g.shape[2], g.shape[3]
    return np.ascontiguousarray(g[:, :, pad.top:h - pad.bottom, pad.left:w - pad.right])


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           pad: PadQuad = PadQuad()) -> Tensor:
    """Zero-padded cross-correlation; ``weight`` is (out_c, in_c, kh, kw)."""
    pad = PadQuad(*pad)
    if min(pad) < 0 or stride < 1:
        raise ValueError("padding must be non-negative and stride positive")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ic}")
    oh = (h + pad.top + pad.bottom - kh) // stride + 1
    ow = (w + pad.left + pad.right - kw) // stride + 1
    if oh < 1 or ow < 1 or h + pad.top + pad.bottom < kh or w + pad.left + pad.right < kw:
        raise ValueError(f"conv2d: non-positive output size for input {x.shape} and kernel {weight.shape}")
    if stride == 1 and not (kh == 1 and kw == 1 and not any(pad)):
        return _conv2d_shifted(x, weight, bias, pad, oh, ow)
    wm = weight.data.reshape(oc, ic * kh * kw)
    pointwise = kh == 1 and kw == 1 and stride == 1 and not any(pad)
    if pointwise:
        xm = x.data.reshape(n, c, h * w)
        y = np.matmul(wm, xm)
        cols = None
    else:
        xp = _pad(x.data, pad)
        cols = kernels.im2col(xp, kh, kw, stride)
        y = (cols @ wm.T).reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    y = y.reshape(n, oc, oh, ow)
    if bias is not None:
        y = y + bias.data.reshape(1, oc, 1, 1)
    out = _out(np.ascontiguousarray(y), "conv2d")
    _count(n * oc * ic * kh * kw * oh * ow)

    def back(gs):
        g = gs[0]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if pointwise:
            gm = g.reshape(n, oc, h * w)
            gw = np.einsum("nop,ncp->oc", gm, xm).reshape(weight.shape)
            gx = np.matmul(wm.T, gm).reshape(x.shape) if x.requires_grad else None
        else:
            gm = g.transpose(0, 2, 3, 1).reshape(-1, oc)
            gw = (gm.T @ cols).reshape(weight.shape)
            gx = None
            if x.requires_grad:
                gx = _unpad(kernels.col2im(np.ascontiguousarray(gm @ wm), xp.shape, kh, kw, stride), pad)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    _record("conv2d", (x, weight, bias) if bias is not None else (x, weight), (out,), back)
    return out


def _conv2d_shifted(x, weight, bias, pad, oh, ow):
    # Stride-1 conv as a sum of one GEMM per kernel tap. The padded input is
    # flattened per channel, so tap (i, j) is a contiguous window starting at
    # i * wp + j; outputs are produced on the padded width and then cropped.
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    hp, wp = h + pad.top + pad.bottom, w + pad.left + pad.right
    xp = np.zeros((n, c, hp + 1, wp), dtype=x.data.dtype)  # spare row keeps the last window in bounds
    xp[:, :, pad.top:pad.top + h, pad.left:pad.left + w] = x.data
    flat = xp.reshape(n, c, (hp + 1) * wp)
    span = oh * wp
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))  # (kh, kw, oc, ic)
    offs = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
    yf = np.zeros((n, oc, span), dtype=xp.dtype)
    for i, j, off in offs:
        yf += np.matmul(taps[i, j], flat[:, :, off:off + span])
    y = yf.reshape(n, oc, oh, wp)[:, :, :, :ow]
    if bias is not None:
        y = y + bias.data.reshape(1, oc, 1, 1)
    out = _out(np.ascontiguousarray(y), "conv2d")
    _count(n * oc * ic * kh * kw * oh * ow)

    def back(gs):
        g = gs[0]
        gf = np.zeros((n, oc, oh, wp), dtype=g.dtype)
        gf[:, :, :, :ow] = g
        gf = gf.reshape(n, oc, span)
        gw = np.empty((kh, kw, oc, ic), dtype=g.dtype)
        gxf = np.zeros_like(flat) if x.requires_grad else None
        for i, j, off in offs:
            win = flat[:, :, off:off + span]
            gw[i, j] = np.matmul(gf, win.transpose(0, 2, 1)).sum(axis=0)
            if gxf is not None:
                gxf[:, :, off:off + span] += np.matmul(taps[i, j].T, gf)
        gx = None
        if gxf is not None:
            gx = np.ascontiguousarray(
                gxf.reshape(n, c, hp + 1, wp)[:, :, pad.top:pad.top + h, pad.left:pad.left + w])
        res = (gx, np.ascontiguousarray(gw.transpose(2, 3, 0, 1)))
        return res + (g.sum(axis=(0, 2, 3)),) if bias is not None else res

    _record("conv2d", (x, weight, bias) if bias is not None else (x, weight), (out,), back)
    return out


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     pad: Optional[PadQuad] = None) -> Tensor:
    """One k x k kernel per channel; ``weight`` is (c, 1, k, k)."""
    n, c, h, w = x.shape
    wc, one, k, k2 = weight.shape
    if wc != c or one != 1 or k != k2:
        raise ValueError(f"depthwise_conv2d: weight {weight.shape} does not match input {x.shape}")
    pad = PadQuad.same(k) if pad is None else PadQuad(*pad)
    xp = np.ascontiguousarray(_pad(x.data, pad))
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ValueError("depthwise_conv2d: kernel larger than padded input")
    wf = np.ascontiguousarray(weight.data.reshape(c, k * k))
    y = kernels.depthwise_forward(xp, wf, k)
    if bias is not None:
        y = y + bias.data.reshape(1, c, 1, 1)
    out = _out(y, "depthwise_conv2d")
    _count(n * c * k * k * y.shape[2] * y.shape[3])

    def back(gs):
        dxp, dw = kernels.depthwise_backward(xp, wf, np.ascontiguousarray(gs[0]), k)
        res = [_unpad(dxp, pad), dw.reshape(weight.shape)]
        if bias is not None:
            res.append(gs[0].sum(axis=(0, 2, 3)))
        return tuple(res)

    _record("depthwise_conv2d", (x, weight, bias) if bias is not None else (x, weight), (out,), back)
    return out


# ----------------------------------------------------------------- pooling / resampling

def pool2d(x: Tensor, mode: str, kernel, stride=None) -> Tensor:
    """Max or average pooling. ``kernel`` may be an int or (kh, kw); the
    full spatial extent gives global pooling."""
    n, c, h, w = x.shape
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    if stride is None:
        stride = kh
    if kh > h or kw > w:
        raise ValueError(f"pool2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pool mode {mode!r}")
    if (kh, kw) == (h, w):
        flat = x.data.reshape(n, c, h * w)
        if mode == "max":
            idx = flat.argmax(axis=2)[..., None]
            y = np.take_along_axis(flat, idx, axis=2)

            def back(gs):
                g = np.zeros_like(flat)
                np.put_along_axis(g, idx, gs[0].reshape(n, c, 1), axis=2)
                return (g.reshape(x.shape),)
        else:
            y = flat.mean(axis=2, keepdims=True)

            def back(gs):
                return (np.broadcast_to(gs[0] / (h * w), x.shape).copy(),)
        out = _out(y.reshape(n, c, 1, 1), f"global_{mode}_pool")
    elif kh == kw == stride and h % kh == 0 and w % kw == 0:
        k = kh
        blocks = x.data.reshape(n, c, h // k, k, w // k, k)
        if mode == "avg":
            y = blocks.mean(axis=(3, 5))

            def back(gs):
                g = np.broadcast_to((gs[0] / (k * k))[:, :, :, None, :, None], blocks.shape)
                return (g.reshape(x.shape).copy(),)
        else:
            y, arg = kernels.maxpool_forward(x.data, k, k)

            def back(gs):
                return (kernels.maxpool_backward(np.ascontiguousarray(gs[0]), arg, x.shape),)
        out = _out(np.ascontiguousarray(y), f"{mode}_pool")
    else:
        if kh != kw:
            raise ValueError("windowed pooling needs a square kernel")
        k = kh
        oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
        if mode == "max":
            y, arg = kernels.maxpool_forward(x.data, k, stride)

            def back(gs):
                return (kernels.maxpool_backward(np.ascontiguousarray(gs[0]), arg, x.shape),)
        else:
            y = np.zeros((n, c, oh, ow), dtype=x.data.dtype)
            for i in range(k):
                for j in range(k):
                    y += x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            y /= k * k

            def back(gs):
                g = np.zeros_like(x.data)
                share = gs[0] / (k * k)
                for i in range(k):
                    for j in range(k):
                        g[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += share
                return (g,)
        out = _out(np.ascontiguousarray(y), f"{mode}_pool")
    _record(f"pool2d_{mode}", (x,), (out,), back)
    return out


@lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    # half-pixel centres, negative source coordinates clamped to 0
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


UPSAMPLE_FACTORS = (2, 4, 8, 16)


def upsample2d(x: Tensor, factor: int, mode: str = "bilinear") -> Tensor:
    if factor not in UPSAMPLE_FACTORS:
        raise ValueError(f"unsupported upsample factor {factor}; expected one of {UPSAMPLE_FACTORS}")
    n, c, h, w = x.shape
    if mode == "nearest":
        y = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

        def back(gs):
            return (gs[0].reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)
    elif mode == "bilinear":
        ah = _bilinear_matrix(h, factor, x.data.dtype.type)
        aw = _bilinear_matrix(w, factor, x.data.dtype.type)
        y = np.matmul(ah, np.matmul(x.data, aw.T))

        def back(gs):
            return (np.matmul(ah.T, np.matmul(gs[0], aw)),)
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    out = _out(np.ascontiguousarray(y), "upsample2d")
    _record("upsample2d", (x,), (out,), back)
    return out


# ----------------------------------------------------------------- normalization

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Batch normalization; updates ``running_mean``/``running_var`` in place in training mode."""
    n, c, h, w = x.shape
    gm = gamma.data.reshape(1, c, 1, 1)
    bt = beta.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d in training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = _out(xhat * gm + bt, "batchnorm2d")

    def back(gs):
        g = gs[0]
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gm
        if training:
            m = n * h * w
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    _record("batchnorm2d", (x, gamma, beta), (out,), back)
    return out


# ----------------------------------------------------------------- FFT

def _is_pow2(v: int) -> bool:
    return v >= 1 and v & (v - 1) == 0


@lru_cache(maxsize=32)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(n: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.arange(max(n // 2, 1)) / n)


def fft_last_axis(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalized iterative radix-2 DFT along the last axis (complex128)."""
    n = a.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"FFT length {n} is not a power of two")
    out = np.array(a, dtype=np.complex128, order="C")
    if n > 1:
        kernels.fft_rows(out.reshape(-1, n), _bitrev(n), _twiddles(n, inverse))
    return out


def fft2_array(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    y = np.swapaxes(fft_last_axis(x, inverse), -1, -2)
    return np.swapaxes(fft_last_axis(y, inverse), -1, -2)


def _check_fft_dims(shape) -> None:
    h, w = shape[-2], shape[-1]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"FFT needs power-of-two spatial dims, got {h}x{w}")


def _fft_macs(shape) -> float:
    n, c, h, w = shape
    hw = h * w
    return n * c * 5 * hw * math.log2(hw) if hw > 1 else 0


def fft2d(x: Tensor) -> ComplexPair:
    """Unnormalized forward 2-D DFT of every (n, c) plane of a real tensor."""
    _check_fft_dims(x.shape)
    z = fft2_array(x.data)
    dt = x.data.dtype
    re = _out(np.ascontiguousarray(z.real, dtype=dt), "fft2d")
    im = _out(np.ascontiguousarray(z.imag, dtype=dt), "fft2d")
    _count(_fft_macs(x.shape))

    def back(gs):
        # adjoint of a real-input DFT: Re(F^H (gR + i gI))
        g = fft2_array(gs[0] + 1j * gs[1], inverse=True)
        return (g.real.astype(dt),)

    _record("fft2d", (x,), (re, im), back)
    return ComplexPair(re, im)


_RESIDUE_TOL = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-9}


def ifft2d(z: ComplexPair) -> Tensor:
    """Inverse DFT with 1/(h*w) scaling; returns the real part.

    Raises :class:`FftResidueError` when the imaginary residue exceeds the
    precision tolerance, i.e. the spectrum was not Hermitian.
    """
    re, im = z
    if re.shape != im.shape:
        raise ValueError(f"ComplexPair parts disagree: {re.shape} vs {im.shape}")
    _check_fft_dims(re.shape)
    h, w = re.shape[-2:]
    dt = re.data.dtype
    y = fft2_array(re.data + 1j * im.data, inverse=True) / (h * w)
    scale_ref = max(1.0, float(np.abs(y.real).max()))
    residue = float(np.abs(y.imag).max())
    if residue > _RESIDUE_TOL[np.dtype(dt)] * scale_ref:
        raise FftResidueError(f"imaginary residue {residue:.3g} after inverse FFT; spectrum is not Hermitian")
    out = _out(np.ascontiguousarray(y.real, dtype=dt), "ifft2d")
    _count(_fft_macs(re.shape))

    def back(gs):
        g = fft2_array(gs[0]) / (h * w)
        return g.real.astype(dt), g.imag.astype(dt)

    _record("ifft2d", (re, im), (out,), back)
    return out


def _reflect(a: np.ndarray) -> np.ndarray:
    # a[..., (-k) % h, (-l) % w]
    return np.roll(a[..., ::-1, ::-1], 1, axis=(-2, -1))


def hermitian_part(z: ComplexPair) -> ComplexPair:
    """Project a spectrum onto its Hermitian-symmetric part.

    The inverse DFT of the result is real and equals the real part of the
    inverse DFT of the input.
    """
    re, im = z
    r = _out(np.ascontiguousarray(0.5 * (re.data + _reflect(re.data))), "hermitian_part")
    i = _out(np.ascontiguousarray(0.5 * (im.data - _reflect(im.data))), "hermitian_part")

    def back(gs):
        # the projection is self-adjoint
        return 0.5 * (gs[0] + _reflect(gs[0])), 0.5 * (gs[1] - _reflect(gs[1]))

    _record("hermitian_part", (re, im), (r, i), back)
    return ComplexPair(r, i)
