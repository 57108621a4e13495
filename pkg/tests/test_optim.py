import math

import numpy as np
import pytest

from fsgnet.gradcheck import finite_diff_check
from fsgnet.module import Parameter
from fsgnet.optim import AdamW, AdamWState, adamw_step, cosine_lr
from fsgnet.tensor import Tensor, mul, precision, relu, tsum


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx(0.5 * (1e-3 + 1e-5))
    assert cosine_lr(0, 0, 1e-3, 1e-5) == 1e-3
    lrs = [cosine_lr(s, 40, 1.0, 0.1) for s in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-3, 1e-5)


def _reference_adamw(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adamw_matches_scalar_reference():
    grads = [0.3, -1.2, 0.05, 2.0, -0.4]
    p = Parameter(np.array([1.5]))
    state = AdamWState.zeros_like([p])
    for g in grads:
        adamw_step([p], [np.array([g])], state, 0.01, 0.1)
    assert p.data[0] == pytest.approx(_reference_adamw(1.5, grads, 0.01, 0.1), rel=1e-12)
    assert state.step == 5


def test_adamw_first_step_is_sign_times_lr():
    p = Parameter(np.array([0.0, 0.0]))
    AdamW([p], lr=0.1, weight_decay=0.0).step([np.array([3.0, -0.001])])
    np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-4)


def test_decay_is_decoupled_from_gradient():
    p = Parameter(np.array([2.0]))
    AdamW([p], lr=0.1, weight_decay=0.5).step([np.array([0.0])])
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_shape_checks():
    p = Parameter(np.zeros(3))
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros(2)], AdamWState.zeros_like([p]), 0.1, 0.0)
    with pytest.raises(ValueError):
        adamw_step([p], [], AdamWState.zeros_like([p]), 0.1, 0.0)


def test_gradcheck_reports_small_error_for_smooth_function():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        assert finite_diff_check(lambda: mul(x, x), [x]) < 1e-8


def test_gradcheck_survives_kinks_and_samples_coordinates():
    with precision(np.float64):
        # an entry sitting right next to the kink: the plain difference straddles it
        x = Tensor(np.array([[3e-5, -1.0, 2.0]]), requires_grad=True)
        assert finite_diff_check(lambda: relu(x), [x]) < 1e-6
        y = Tensor(np.random.default_rng(1).standard_normal((50,)), requires_grad=True)
        assert finite_diff_check(lambda: tsum(mul(y, y)), [y], max_coords=5) < 1e-8


def test_gradcheck_rejects_unknown_outputs():
    with pytest.raises(TypeError):
        finite_diff_check(lambda: 3.0, [])
