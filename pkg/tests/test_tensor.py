import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fsgnet import kernels
from fsgnet.gradcheck import finite_diff_check
from fsgnet.tensor import (ComplexPair, FftResidueError, NonFiniteError, PadQuad, Tape, Tensor, add,
                           backward, batchnorm2d, concat_channels, conv2d, count_macs,
                           depthwise_conv2d, fft2d, hermitian_part, ifft2d, mul, pool2d, precision,
                           relu, scale, sigmoid, split_channels, tsum, upsample2d)

from oracles import conv_loops, dft2_direct


def grad_of(f, *xs):
    with Tape() as tape:
        loss = f(*xs)
    backward(tape, loss)
    return [x.grad for x in xs]


# ---------------------------------------------------------------- conv

def test_conv_all_ones_2x2():
    x = Tensor([[[[1, 2], [3, 4]]]])
    y = conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    assert y.data.tolist() == [[[[10.0]]]]


def test_conv_asymmetric_left_pad():
    x = Tensor([[[[1, 2], [3, 4]]]])
    y = conv2d(x, Tensor(np.ones((1, 1, 1, 3))), pad=PadQuad(2, 0, 0, 0))
    np.testing.assert_array_equal(y.data[0, 0], [[1, 3], [3, 7]])


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_dirac_identity(k):
    rng = np.random.default_rng(k)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    w = np.zeros((3, 3, k, k))
    for c in range(3):
        w[c, c, k // 2, k // 2] = 1
    y = conv2d(x, Tensor(w), pad=PadQuad.same(k))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_matches_loops_on_100_cases():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c, oc = rng.integers(1, 4, size=2)
        kh, kw = rng.integers(1, 4, size=2)
        pad = tuple(int(v) for v in rng.integers(0, 3, size=4))
        stride = int(rng.integers(1, 3))
        h, w = rng.integers(max(kh, kw), 7, size=2)
        x = rng.standard_normal((int(rng.integers(1, 3)), c, h, w)).astype(np.float32)
        wt = rng.standard_normal((oc, c, kh, kw)).astype(np.float32)
        b = rng.standard_normal(oc).astype(np.float32)
        y = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, PadQuad(*pad))
        np.testing.assert_allclose(y.data, conv_loops(x, wt, b, stride, pad), atol=1e-5)


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="channels"):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="output size"):
        conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))


def test_depthwise_dirac_and_constant():
    x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 5, 5)))
    w = np.zeros((2, 1, 3, 3))
    w[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(depthwise_conv2d(x, Tensor(w)).data, x.data)
    v = 0.75
    y = depthwise_conv2d(Tensor(np.full((1, 1, 5, 5), v)), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_allclose(y.data[0, 0, 1:-1, 1:-1], 9 * v)


def test_depthwise_matches_grouped_loops():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 1, 3, 3))
    y = depthwise_conv2d(Tensor(x), Tensor(w)).data
    for c in range(2):
        ref = conv_loops(x[:, c:c + 1], w[c:c + 1], None, 1, (1, 1, 1, 1))
        np.testing.assert_allclose(y[:, c:c + 1], ref, atol=1e-5)


def test_depthwise_channel_mismatch():
    with pytest.raises(ValueError):
        depthwise_conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))))


# ---------------------------------------------------------------- pooling / upsampling

def test_pool_small_cases():
    x = Tensor([[[[1, 2], [3, 4]]]])
    assert pool2d(x, "avg", 2).data.item() == 2.5
    assert pool2d(x, "max", 2).data.item() == 4.0
    const = Tensor(np.full((2, 3, 8, 8), 1.25))
    np.testing.assert_array_equal(pool2d(const, "avg", 8).data, np.full((2, 3, 1, 1), 1.25))


def test_pool_errors():
    with pytest.raises(ValueError):
        pool2d(Tensor(np.zeros((1, 1, 2, 2))), "max", 3)


def test_max_pool_routes_grad_to_argmax():
    rng = np.random.default_rng(3)
    x = Tensor(rng.permutation(64).reshape(1, 1, 8, 8).astype(float), requires_grad=True)
    (g,) = grad_of(lambda t: tsum(pool2d(t, "max", 2)), x)
    blocks = x.data[0, 0].reshape(4, 2, 4, 2).transpose(0, 2, 1, 3).reshape(16, 4)
    expected = np.zeros(64)
    flat_idx = np.arange(64).reshape(8, 8).reshape(4, 2, 4, 2).transpose(0, 2, 1, 3).reshape(16, 4)
    expected[flat_idx[np.arange(16), blocks.argmax(axis=1)]] = 1
    np.testing.assert_array_equal(g.reshape(-1), expected)


def test_nearest_upsample():
    y = upsample2d(Tensor([[[[1, 2], [3, 4]]]]), 2, "nearest")
    np.testing.assert_array_equal(y.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_bilinear_constant_and_ramp():
    np.testing.assert_allclose(upsample2d(Tensor(np.full((1, 2, 4, 4), 3.0)), 4).data, 3.0, rtol=1e-6)
    ramp = np.array([[0.0, 1.0], [2.0, 3.0]])
    y = upsample2d(Tensor(ramp[None, None]), 2).data[0, 0]

    def sample(o, n):
        # half-pixel centre, clamped to the valid source range
        s = min(max((o + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n - 1)
        return i0, i1, s - i0

    for r in range(4):
        for c in range(4):
            r0, r1, fr = sample(r, 2)
            c0, c1, fc = sample(c, 2)
            top = ramp[r0, c0] * (1 - fc) + ramp[r0, c1] * fc
            bot = ramp[r1, c0] * (1 - fc) + ramp[r1, c1] * fc
            assert abs(y[r, c] - (top * (1 - fr) + bot * fr)) < 1e-6


def test_upsample_bad_factor():
    with pytest.raises(ValueError):
        upsample2d(Tensor(np.zeros((1, 1, 2, 2))), 3)


# ---------------------------------------------------------------- batchnorm

def _bn(x, gamma, beta, training=True):
    c = x.shape[1]
    rm, rv = np.zeros(c, np.float32), np.ones(c, np.float32)
    return batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training), rm, rv


def test_batchnorm_examples():
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
    y, _, _ = _bn(x, np.ones(1), np.zeros(1))
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), rtol=1e-6)
    y, _, _ = _bn(np.random.default_rng(0).standard_normal((2, 3, 4, 4)), np.zeros(3), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_array_equal(y.data, np.broadcast_to(np.array([1.0, -2.0, 0.5]).reshape(1, 3, 1, 1), y.shape))


def test_batchnorm_moments_and_running_stats():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 2, 8, 8)) * 3 + 1
    gamma, beta = np.array([2.0, -0.5]), np.array([0.3, 1.0])
    with precision(np.float64):
        y, rm, rv = _bn(x, gamma, beta)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), beta, atol=1e-4)
    np.testing.assert_allclose(y.data.std(axis=(0, 2, 3)), np.abs(gamma), atol=1e-4)
    m = 4 * 8 * 8
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), rtol=1e-5)


def test_batchnorm_zero_variance_is_finite():
    y, _, _ = _bn(np.full((1, 1, 4, 4), 7.0), np.ones(1), np.zeros(1))
    assert np.all(y.data == 0)


# ---------------------------------------------------------------- elementwise

def test_elementwise_examples():
    assert sigmoid(Tensor([0.0])).data.item() == 0.5
    np.testing.assert_array_equal(relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])
    a = Tensor(np.random.default_rng(5).standard_normal((1, 2, 3, 3)))
    b = Tensor(np.random.default_rng(6).standard_normal((1, 3, 3, 3)))
    pa, pb = split_channels(concat_channels([a, b]), [2, 3])
    np.testing.assert_array_equal(pa.data, a.data)
    np.testing.assert_array_equal(pb.data, b.data)


def test_channel_broadcast_and_shape_errors():
    x = Tensor(np.ones((1, 3, 2, 2)))
    assert mul(x, Tensor(np.full((1, 1, 2, 2), 2.0))).data.sum() == 24
    assert mul(x, Tensor(np.full((1, 3, 1, 1), 0.5))).data.sum() == 6
    with pytest.raises(ValueError, match="incompatible"):
        add(x, Tensor(np.ones((1, 2, 2, 2))))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        scale(Tensor([1.0]), float("inf"))


def test_sigmoid_extremes_stay_finite():
    s = sigmoid(Tensor([-1000.0, 1000.0])).data
    assert s[0] == 0.0 and s[1] == 1.0


# ---------------------------------------------------------------- backward

def test_sum_grad_is_ones():
    x = Tensor(np.random.default_rng(7).standard_normal((2, 3, 4, 4)), requires_grad=True)
    (g,) = grad_of(tsum, x)
    np.testing.assert_array_equal(g, np.ones_like(x.data))


def test_relu_grad_piecewise():
    x = Tensor([[[[-1.0, 1.0]]]], requires_grad=True)
    (g,) = grad_of(lambda t: tsum(relu(t)), x)
    np.testing.assert_array_equal(g, [[[[0.0, 1.0]]]])


def test_fan_out_accumulates():
    x = Tensor([[[[2.0]]]], requires_grad=True)
    (g,) = grad_of(lambda t: tsum(add(mul(t, t), t)), x)
    assert g.item() == 5.0


def test_double_backward_rejected():
    x = Tensor([[[[1.0]]]], requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    backward(tape, loss)
    with pytest.raises(RuntimeError):
        backward(tape, loss)
    tape.reset()


def test_disconnected_param_warns_and_zero_fills():
    x = Tensor([[[[1.0]]]], requires_grad=True)
    lonely = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    with pytest.warns(RuntimeWarning, match="not reached"):
        backward(tape, loss, [x, lonely])
    np.testing.assert_array_equal(lonely.grad, 0)


def test_composite_conv_bn_sigmoid_gradcheck():
    rng = np.random.default_rng(8)
    with precision(np.float64):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        gamma, beta = Tensor(rng.uniform(0.5, 1.5, 3), True), Tensor(rng.standard_normal(3), True)

        def f():
            y = conv2d(x, w, pad=PadQuad.same(3))
            y = batchnorm2d(y, gamma, beta, np.zeros(3), np.ones(3), training=True)
            return tsum(sigmoid(y))

        assert finite_diff_check(f, [x, w, gamma, beta], step=1e-4) < 1e-4


# op name -> (function of input and weight, weight shape or None)
OPS = {
    "conv_stride2": (lambda x, w: conv2d(x, w, stride=2, pad=PadQuad(1, 0, 1, 0)), (3, 2, 3, 3)),
    "conv_pinwheel_left": (lambda x, w: conv2d(x, w, pad=PadQuad(2, 0, 0, 0)), (3, 2, 1, 3)),
    "conv_fuse_2x2": (lambda x, w: conv2d(x, w, pad=PadQuad(0, 1, 0, 1)), (3, 2, 2, 2)),
    "conv_1x1": (lambda x, w: conv2d(x, w), (3, 2, 1, 1)),
    "depthwise": (lambda x, w: depthwise_conv2d(x, w), (2, 1, 3, 3)),
    "max_pool": (lambda x, w: pool2d(x, "max", 2), None),
    "avg_pool_overlap": (lambda x, w: pool2d(x, "avg", 3, 1), None),
    "global_max": (lambda x, w: pool2d(x, "max", 4), None),
    "bilinear": (lambda x, w: upsample2d(x, 2), None),
    "nearest": (lambda x, w: upsample2d(x, 4, "nearest"), None),
    "fft": (lambda x, w: fft2d(x), None),
    "fft_roundtrip": (lambda x, w: ifft2d(hermitian_part(ComplexPair(*(mul(p, x) for p in fft2d(x))))), None),
    "bn_eval": (lambda x, w: batchnorm2d(x, w, Tensor([0.1, -0.2]), np.full(2, 0.3), np.full(2, 2.0),
                                         training=False), (2,)),
    "bn_train": (lambda x, w: batchnorm2d(x, w, Tensor([0.1, -0.2]), np.zeros(2), np.ones(2),
                                          training=True), (2,)),
    "sigmoid_mul": (lambda x, w: mul(sigmoid(x), x), None),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, wshape = OPS[name]
    rng = np.random.default_rng(9)
    with precision(np.float64):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal(wshape), requires_grad=True) if wshape else None
        err = finite_diff_check(lambda: fn(x, w), [x] + ([w] if w is not None else []))
    assert err < 1e-4


def test_gradcheck_linear_map_is_exact():
    with precision(np.float64):
        x = Tensor(np.random.default_rng(10).standard_normal((1, 1, 3, 3)), requires_grad=True)
        assert finite_diff_check(lambda: scale(x, 3.0), [x]) < 1e-9


def test_gradcheck_flags_broken_backward():
    import fsgnet.tensor as T

    def bad_relu(x):
        out = T._out(np.maximum(x.data, 0), "relu")
        T._record("relu", (x,), (out,), lambda gs: (gs[0] * 0.5,))
        return out

    with precision(np.float64):
        x = Tensor(np.random.default_rng(11).uniform(0.5, 2, (1, 1, 3, 3)), requires_grad=True)
        assert finite_diff_check(lambda: bad_relu(x), [x]) > 1e-2


# ---------------------------------------------------------------- FFT

def test_fft_2x2_example():
    z = fft2d(Tensor([[[[1, 2], [3, 4]]]]))
    np.testing.assert_allclose(z.real.data[0, 0], [[10, -2], [-4, 0]], atol=1e-6)
    np.testing.assert_array_equal(z.imag.data, 0)


def test_fft_constant_is_dc_only():
    v, h, w = 0.25, 8, 16
    z = fft2d(Tensor(np.full((1, 1, h, w), v)))
    expected = np.zeros((h, w))
    expected[0, 0] = v * h * w
    np.testing.assert_allclose(z.real.data[0, 0], expected, atol=1e-5)
    np.testing.assert_allclose(z.imag.data[0, 0], 0, atol=1e-5)


@pytest.mark.parametrize("hw", [8, 16])
def test_fft_matches_direct_dft(hw):
    x = np.random.default_rng(hw).standard_normal((hw, hw))
    z = fft2d(Tensor(x[None, None]))
    ref = dft2_direct(x)
    np.testing.assert_allclose(z.real.data[0, 0], ref.real, atol=1e-4)
    np.testing.assert_allclose(z.imag.data[0, 0], ref.imag, atol=1e-4)


def test_fft_roundtrip_and_parseval():
    x = np.random.default_rng(12).standard_normal((2, 3, 64, 64)).astype(np.float32)
    z = fft2d(Tensor(x))
    np.testing.assert_allclose(ifft2d(z).data, x, atol=1e-4)
    lhs = float(np.sum(x.astype(np.float64) ** 2))
    rhs = float(np.sum(z.real.data.astype(np.float64) ** 2 + z.imag.data.astype(np.float64) ** 2)) / (64 * 64)
    assert abs(lhs - rhs) / lhs < 1e-4
    with precision(np.float64):
        x64 = Tensor(x)
        np.testing.assert_allclose(ifft2d(fft2d(x64)).data, x64.data, atol=1e-10)


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ValueError, match="power-of-two"):
        fft2d(Tensor(np.zeros((1, 1, 6, 8))))


def test_ifft_residue_check_and_hermitian_projection():
    rng = np.random.default_rng(13)
    z = ComplexPair(Tensor(rng.standard_normal((1, 1, 8, 8))), Tensor(rng.standard_normal((1, 1, 8, 8))))
    with pytest.raises(FftResidueError):
        ifft2d(z)
    expected = np.fft.ifft2(z.real.data + 1j * z.imag.data).real
    np.testing.assert_allclose(ifft2d(hermitian_part(z)).data, expected, atol=1e-5)


def test_count_macs_conv_and_fft():
    x = Tensor(np.zeros((2, 3, 8, 8)))
    with count_macs() as c:
        conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), pad=PadQuad.same(3))
    assert c["macs"] == 2 * 4 * 3 * 9 * 64
    with count_macs() as c:
        fft2d(x)
    assert c["macs"] == 2 * 3 * 5 * 64 * 6


# ---------------------------------------------------------------- backends

py = kernels.python_kernels


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 7), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 2**31 - 1))
def test_backends_agree_im2col(n, c, size, k, stride, seed):
    xp = np.random.default_rng(seed).standard_normal((n, c, size, size)).astype(np.float32)
    cols = kernels.im2col(xp, k, k, stride)
    np.testing.assert_array_equal(cols, py.im2col(xp, k, k, stride))
    np.testing.assert_allclose(kernels.col2im(cols, xp.shape, k, k, stride),
                               py.col2im(cols, xp.shape, k, k, stride), rtol=1e-6, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.sampled_from([3, 5]), st.integers(0, 2**31 - 1))
def test_backends_agree_depthwise_and_pool(n, c, k, seed):
    rng = np.random.default_rng(seed)
    xp = rng.standard_normal((n, c, 8, 8))
    w = rng.standard_normal((c, k * k))
    dy = rng.standard_normal((n, c, 9 - k, 9 - k))
    np.testing.assert_allclose(kernels.depthwise_forward(xp, w, k), py.depthwise_forward(xp, w, k), atol=1e-12)
    for a, b in zip(kernels.depthwise_backward(xp, w, dy, k), py.depthwise_backward(xp, w, dy, k)):
        np.testing.assert_allclose(a, b, atol=1e-12)
    y1, a1 = kernels.maxpool_forward(xp, 2, 2)
    y2, a2 = py.maxpool_forward(xp, 2, 2)
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(a1, a2)
    g = rng.standard_normal(y1.shape)
    np.testing.assert_array_equal(kernels.maxpool_backward(g, a1, xp.shape), py.maxpool_backward(g, a2, xp.shape))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 6), st.integers(1, 5), st.booleans(), st.integers(0, 2**31 - 1))
def test_backends_agree_fft_rows(log_n, rows, inverse, seed):
    from fsgnet.tensor import _bitrev, _twiddles
    n = 2 ** log_n
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((rows, n)) + 1j * rng.standard_normal((rows, n))
    b = a.copy()
    ref = np.fft.ifft(a, axis=1) * n if inverse else np.fft.fft(a, axis=1)
    if n > 1:
        kernels.fft_rows(a, _bitrev(n), _twiddles(n, inverse))
        py.fft_rows(b, _bitrev(n), _twiddles(n, inverse))
    np.testing.assert_allclose(a, ref, atol=1e-9)
    np.testing.assert_allclose(b, ref, atol=1e-9)
