import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from tip import diffeng as ad
from tip.losses import (
    EmptyGroundTruth, LossConfig, accuracy_loss, decision_probabilities, task_reward, total_loss,
)
from tip.model import PredictionSampleSet

ex = pytest.mark.criterion(2)


def gt_line(n=2, t=5):
    return np.stack([np.c_[np.arange(t) * 1.0 + i, np.full(t, float(i))] for i in range(n)])


@ex
def test_accuracy_single_exact_sample():
    gt = gt_line()
    assert accuracy_loss(PredictionSampleSet(gt[None], [1.0]), gt) == 0.0


@ex
def test_accuracy_best_sample_weight():
    gt = gt_line()
    preds = PredictionSampleSet(np.stack([gt + 1.0, gt]), [0.25, 0.75])
    assert abs(accuracy_loss(preds, gt) - (-math.log(0.75))) < 1e-9
    assert abs(accuracy_loss(preds, gt) - 0.2877) < 1e-4


@ex
def test_accuracy_tie_uses_lowest_index():
    gt = gt_line()
    off = gt + np.array([3.0, 4.0])           # every point 5 m away
    preds = PredictionSampleSet(np.stack([off, off, off]), [0.2, 0.3, 0.5])
    assert abs(accuracy_loss(preds, gt) - (-math.log(0.2) + 5.0)) < 1e-9


def test_accuracy_respects_mask():
    gt = gt_line()
    valid = np.ones(gt.shape[:2], bool)
    valid[:, 2:] = False
    s = gt.copy()
    s[:, 2:] += 100.0
    assert accuracy_loss(PredictionSampleSet(s[None], [1.0]), gt, valid) == 0.0


def test_accuracy_empty_ground_truth():
    gt = gt_line()
    with pytest.raises(EmptyGroundTruth):
        accuracy_loss(PredictionSampleSet(gt[None], [1.0]), gt, np.zeros(gt.shape[:2], bool))


@ex
def test_reward_equal_utilities():
    for opt in range(3):
        assert abs(task_reward([2.0, 2.0, 2.0], opt) - 1 / 3) < 1e-9


@ex
def test_reward_two_decisions():
    assert abs(task_reward([1.0, 0.0], 0) - math.e / (math.e + 1)) < 1e-9
    assert abs(task_reward([1.0, 0.0], 0) - 0.7311) < 1e-4


@ex
def test_reward_shift():
    u = np.array([0.3, -2.0, 5.0])
    assert abs(task_reward(u + 123.4, 1) - task_reward(u, 1)) < 1e-9


@ex
def test_total_alpha_zero_is_accuracy():
    assert total_loss(1.7, 0.4, LossConfig(alpha=0.0)) == 1.7


@ex
def test_total_arithmetic():
    assert abs(total_loss(1.0, 0.5, LossConfig(alpha=20.0)) - (-9.0)) < 1e-9


@ex
def test_total_gradient_flows_through_both_terms():
    gt = gt_line(t=4)
    rng = np.random.default_rng(0)
    samples = gt[None] + rng.normal(size=(2,) + gt.shape)
    logits = np.array([0.2, -0.4])

    def loss(tape, P):
        w = ad.softmax(P["logits"])
        acc = accuracy_loss((P["x"], w), gt)
        d = ad.norm(ad.sub(P["x"][:, 0], P["x"][:, 1]), axis=-1)
        u = ad.sum_(ad.mul(w, ad.sigmoid(ad.sub(3.64, ad.min_axis(d, axis=-1)))))
        util = ad.concat([u.reshape(1), ad.sub(1.0, u).reshape(1)])
        return total_loss(acc, task_reward(util, 0), LossConfig(alpha=20.0))

    params = {"x": samples, "logits": logits}
    tape = ad.Tape()
    g = ad.backward(tape, loss(tape, tape.params(params)))
    assert np.abs(g["x"]).max() > 0 and np.abs(g["logits"]).max() > 0
    assert ad.grad_check(loss, params) < 1e-6

    # the task term contributes on its own: alpha changes the gradient
    def acc_only(tape, P):
        return accuracy_loss((P["x"], ad.softmax(P["logits"])), gt)
    tape2 = ad.Tape()
    g2 = ad.backward(tape2, acc_only(tape2, tape2.params(params)))
    assert not np.allclose(g["x"], g2["x"])


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=-1.0)


# ---------------------------------------------------------------------------
# properties

utils = hnp.arrays(np.float64, st.integers(2, 8), elements=st.floats(-30, 30))


@pytest.mark.criterion(9)
@given(utils, st.data())
def test_reward_in_open_unit_interval(u, data):
    opt = data.draw(st.integers(0, len(u) - 1))
    r = task_reward(u, opt)
    assert 0.0 < r <= 1.0
    # 1 - r is representable only while some rival sits within ~52 ln 2 of the optimum
    if np.delete(u, opt).max() > u[opt] - 35.0:
        assert r < 1.0
    assert abs(decision_probabilities(u).sum() - 1.0) < 1e-9


@pytest.mark.criterion(9)
@given(utils, st.floats(-1e3, 1e3))
def test_decision_argmax_shift_invariant(u, c):
    assert np.argmax(decision_probabilities(u + c)) == np.argmax(decision_probabilities(u))


@st.composite
def sample_sets(draw):
    k = draw(st.integers(1, 4))
    n, t = draw(st.integers(1, 3)), draw(st.integers(1, 6))
    s = draw(hnp.arrays(np.float64, (k, n, t, 2), elements=st.floats(-20, 20)))
    logits = draw(hnp.arrays(np.float64, k, elements=st.floats(-5, 5)))
    gt = draw(hnp.arrays(np.float64, (n, t, 2), elements=st.floats(-20, 20)))
    w = decision_probabilities(logits)
    return PredictionSampleSet(s, w), gt


@pytest.mark.criterion(9)
@given(sample_sets())
def test_accuracy_nonnegative(pair):
    preds, gt = pair
    assert accuracy_loss(preds, gt) >= 0.0


@pytest.mark.criterion(9)
@given(sample_sets(), st.floats(0.05, 0.95))
def test_accuracy_monotone_in_best_distance(pair, shrink):
    preds, gt = pair
    d = [np.hypot(*(s - gt).transpose(2, 0, 1)).mean() for s in preds.samples]
    k = int(np.argmin(d))
    if d[k] < 1e-6:
        return
    moved = preds.samples.copy()
    moved[k] = gt + shrink * (preds.samples[k] - gt)
    closer = PredictionSampleSet(moved, preds.weights)
    assert accuracy_loss(closer, gt) < accuracy_loss(preds, gt)
