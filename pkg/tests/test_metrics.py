import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fsgnet.gradcheck import finite_diff_check
from fsgnet.losses import soft_iou_loss, total_loss
from fsgnet.metrics import (MetricsAccumulator, default_thresholds, fa, iou, niou, pd, pixel_confusion, report,
                            roc_curve, write_report_csv)
from fsgnet.tensor import Tape, Tensor, backward, precision


def _brute(pred, gt, th=0.5):
    tp = fp = tn = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p >= th and g > 0.5:
            tp += 1
        elif p >= th:
            fp += 1
        elif g > 0.5:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


# ---------------------------------------------------------------- metrics

pair = st.tuples(arrays(np.float64, (3, 1, 5, 5), elements=st.floats(0, 1)),
                 arrays(np.float64, (3, 1, 5, 5), elements=st.sampled_from([0.0, 1.0])))


@given(pair)
@settings(max_examples=60, deadline=None)
def test_metrics_match_brute_force(pg):
    p, g = pg
    acc = MetricsAccumulator()
    acc.update(p, g)
    tp, fp, tn, fn = _brute(p, g)
    assert (acc.tp, acc.fp, acc.tn, acc.fn) == (tp, fp, tn, fn)
    assert iou(acc) == (tp / (tp + fp + fn) if tp + fp + fn else 0.0)
    assert pd(acc) == (tp / (tp + fn) if tp + fn else 0.0)
    assert fa(acc) == (fp / (fp + tn) if fp + tn else 0.0)
    per = []
    for pi, gi in zip(p, g):
        a, b, _, c = _brute(pi, gi)
        per.append(a / (a + b + c) if a + b + c else 1.0)
    assert niou(acc) == pytest.approx(np.mean(per), abs=1e-15)


def test_metrics_examples():
    p = np.array([[0.9, 0.2], [0.5, 0.49]])
    g = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert pixel_confusion(p, g) == (1, 1, 1, 1)
    acc = MetricsAccumulator()
    acc.update(p[None], g[None])
    assert iou(acc) == pytest.approx(1 / 3)
    assert pd(acc) == 0.5 and fa(acc) == 0.5


def test_empty_target_and_prediction_is_flagged():
    acc = MetricsAccumulator()
    acc.update(np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 4, 4)))
    rep = report(acc)
    assert rep.iou == 0.0 and rep.niou == 1.0 and rep.pd == 0.0 and rep.fa == 0.0
    assert "empty_target_and_prediction" in rep.flags
    assert "degenerate_samples=2" in rep.flags


def test_accumulator_merge_equals_single_pass():
    rng = np.random.default_rng(0)
    p, g = rng.random((6, 1, 8, 8)), (rng.random((6, 1, 8, 8)) > 0.8).astype(float)
    a, b, whole = MetricsAccumulator(), MetricsAccumulator(), MetricsAccumulator()
    a.update(p[:2], g[:2])
    b.update(p[2:], g[2:])
    whole.update(p, g)
    m = a.merge(b)
    assert report(m) == report(whole)
    with pytest.raises(ValueError):
        a.merge(MetricsAccumulator(threshold=0.3))


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        pixel_confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_report_csv(tmp_path):
    acc = MetricsAccumulator()
    acc.update(np.eye(4)[None, None], np.eye(4)[None, None])
    write_report_csv([report(acc)], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == "iou,niou,pd,fa_e6,n_samples\n1.000000,1.000000,1.000000,0.0000,1\n"


# ---------------------------------------------------------------- ROC

def test_roc_matches_brute_force_and_is_monotone():
    rng = np.random.default_rng(3)
    preds = [rng.random((16, 16)) for _ in range(5)]
    gts = [(rng.random((16, 16)) > 0.9).astype(float) for _ in range(5)]
    roc = roc_curve(preds, gts)
    p, g = np.stack(preds), np.stack(gts)
    for t, tpr, fpr in roc.points:
        tp, fp, tn, fn = _brute(p, g, t)
        assert tpr == tp / (tp + fn) and fpr == fp / (fp + tn)
    tprs = [pt[1] for pt in roc.points]
    assert tprs == sorted(tprs)
    assert roc.points[-1][1:] == (1.0, 1.0)


def test_roc_grid_checks(tmp_path):
    with pytest.raises(ValueError, match="decreasing"):
        roc_curve([np.zeros(2)], [np.zeros(2)], [0.1, 0.5])
    with pytest.raises(ValueError):
        roc_curve([np.zeros(2)], [np.zeros(2)], [])
    roc = roc_curve([np.array([0.7, 0.2])], [np.array([1.0, 0.0])], [1.0, 0.5, 0.0])
    roc.write_csv(tmp_path / "roc.csv")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,tpr,fpr" and len(lines) == 4
    assert default_thresholds()[0] == 1.0 and default_thresholds()[-1] == 0.0


# ---------------------------------------------------------------- loss

def test_soft_iou_values():
    g = np.zeros((1, 1, 4, 4))
    g[0, 0, 1, 1] = 1
    assert soft_iou_loss(Tensor(g), g).item() == pytest.approx(0.0, abs=1e-6)
    assert soft_iou_loss(Tensor(1 - g), g).item() == pytest.approx(1.0, abs=1e-6)
    p = np.full((1, 1, 4, 4), 0.5)
    expected = 1 - (0.5 + 1e-6) / (8 + 1 - 0.5 + 1e-6)
    assert soft_iou_loss(Tensor(p), g).item() == pytest.approx(expected, rel=1e-6)
    with pytest.raises(ValueError):
        soft_iou_loss(Tensor(p), np.zeros((1, 1, 2, 2)))


def test_soft_iou_gradient():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        p = Tensor(rng.random((2, 1, 8, 8)), requires_grad=True)
        g = (rng.random((2, 1, 8, 8)) > 0.7).astype(np.float64)
        assert finite_diff_check(lambda: soft_iou_loss(p, g), [p]) < 1e-6
        a = Tensor(rng.random((2, 1, 8, 8)), requires_grad=True)
        assert finite_diff_check(lambda: total_loss(p, a, g), [p, a]) < 1e-6


def test_total_loss_adds_aux():
    rng = np.random.default_rng(5)
    p, a = Tensor(rng.random((1, 1, 4, 4))), Tensor(rng.random((1, 1, 4, 4)))
    g = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float32)
    both = total_loss(p, a, g).item()
    assert both == pytest.approx(soft_iou_loss(p, g).item() + soft_iou_loss(a, g).item(), rel=1e-6)
    assert total_loss(p, None, g).item() == soft_iou_loss(p, g).item()
    with Tape() as tape:
        loss = total_loss(p, None, g)
    backward(tape, loss)
