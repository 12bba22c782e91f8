import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from afford3d.autodiff import Tensor
from afford3d.traineval.losses import LossWeights, bce_loss, dice_loss, text_loss, total_loss
from afford3d.traineval.metrics import metric_auc, metric_mae, metric_miou, metric_sim

unit = st.floats(0.0, 1.0, allow_nan=False)


def pair(max_n=32):
    return st.integers(2, max_n).flatmap(
        lambda n: st.tuples(arrays(np.float64, n, elements=unit), arrays(np.float64, n, elements=unit)))


def auc_pairs(pred, gt):
    pos, neg = pred[gt > 0], pred[gt <= 0]
    if not len(pos) or not len(neg):
        return None
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def miou_sets(pred, gt):
    g = {i for i, v in enumerate(gt) if v > 0}
    vals = []
    for t in [k / 10 for k in range(1, 10)]:
        p = {i for i, v in enumerate(pred) if v >= t}
        u = p | g
        vals.append(1.0 if not u else len(p & g) / len(u))
    return math.fsum(vals) / len(vals)


# ---------------------------------------------------------------- losses

def test_dice_examples():
    m = np.array([1.0, 0, 1, 0])
    assert dice_loss(m, m).item() <= 1e-6
    assert dice_loss(m, 1 - m).item() == pytest.approx(1.0, abs=1e-6)
    assert dice_loss([0.5, 0.5], [1.0, 0.0]).item() == pytest.approx(0.5, abs=1e-6)


def test_bce_examples(rng):
    assert bce_loss(np.full(10, 0.5), rng.uniform(size=10)).item() == pytest.approx(math.log(2), abs=1e-12)
    m = np.array([1.0, 0, 1])
    assert bce_loss(m, m).item() <= 2e-7
    assert bce_loss([0.9, 0.1], [1.0, 0.0]).item() == pytest.approx(-math.log(0.9), abs=1e-12)


def test_text_loss_examples(rng):
    big = np.array([[0.0, 0.0, 60.0, 0.0]])
    assert text_loss(big, 3).item() < 1e-20
    assert text_loss(np.zeros((1, 4)), 2).item() == pytest.approx(math.log(4), abs=1e-12)
    z = rng.normal(size=4)
    expected = -(z[1] - math.log(np.exp(z).sum()))
    assert text_loss(z[None], 2).item() == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError):
        text_loss(z[None], 5)


def test_total_loss_examples():
    t = lambda v: Tensor(np.array(v))
    w1 = LossWeights(0, 1, 0)
    assert total_loss(w1, [t(0.3), t(0.5)], [t(0.9), t(0.1)], t(2.0)).item() == pytest.approx(0.4)
    assert total_loss(LossWeights(), [t(0.0)], [t(0.0)], t(0.0)).item() == 0.0
    assert total_loss(LossWeights(), [t(0.3)], [t(0.4)], t(0.2)).item() == pytest.approx(0.9)
    with pytest.raises(ValueError):
        total_loss(LossWeights(), [t(0.3)], [], t(0.2))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)


def test_length_mismatch():
    for fn in (dice_loss, bce_loss, metric_auc, metric_miou, metric_sim, metric_mae):
        with pytest.raises(ValueError):
            v = fn(np.zeros(3), np.zeros(4))
            getattr(v, "item", lambda: None)()


@given(pair())
def test_losses_bounded_and_permutation_symmetric(pg):
    pred, gt = pg
    perm = np.random.default_rng(len(pred)).permutation(len(pred))
    d, b = dice_loss(pred, gt).item(), bce_loss(pred, gt).item()
    assert -1e-12 <= d <= 1 + 1e-12
    assert 0 <= b <= -math.log(1e-7) + 1e-9
    assert dice_loss(pred[perm], gt[perm]).item() == pytest.approx(d, abs=1e-12)
    assert bce_loss(pred[perm], gt[perm]).item() == pytest.approx(b, abs=1e-12)


# ---------------------------------------------------------------- metrics

def test_metric_examples():
    gt = np.array([0, 1, 1, 0.0])
    assert metric_auc([0.1, 0.9, 0.8, 0.2], gt) == 1.0
    assert metric_auc(np.full(4, 0.3), gt) == 0.5
    assert metric_auc([0.1, 0.2], [1.0, 1.0]) is None
    assert metric_miou(gt, gt) == 1.0
    assert metric_miou(1 - gt, gt) == 0.0
    assert metric_miou(np.zeros(4), np.zeros(4)) == 1.0
    assert metric_sim(gt, gt) == pytest.approx(1.0, abs=1e-12)
    assert metric_sim([1.0, 0, 0], [0, 1.0, 0]) == 0.0
    assert metric_sim([0.5, 0.5, 0], [0, 0.5, 0.5]) == pytest.approx(0.5, abs=1e-12)
    assert metric_sim(np.zeros(3), gt[:3]) is None
    assert metric_mae(gt, gt) == 0.0
    assert metric_mae(np.ones(3), np.zeros(3)) == 1.0
    assert metric_mae([0.2, 0.8], [0.5, 0.5]) == pytest.approx(0.3, abs=1e-12)


def test_auc_oracle_random(rng):
    for _ in range(100):
        n = int(rng.integers(2, 65))
        pred = np.round(rng.uniform(size=n), 1)            # coarse grid forces ties
        gt = (rng.uniform(size=n) < 0.4) * rng.uniform(0.1, 1, size=n)
        assert metric_auc(pred, gt) == auc_pairs(pred, gt)


def test_miou_oracle_random(rng):
    for _ in range(100):
        n = int(rng.integers(1, 33))
        pred, gt = np.round(rng.uniform(size=n), 2), (rng.uniform(size=n) < 0.5) * rng.uniform(size=n)
        assert metric_miou(pred, gt) == miou_sets(pred, gt)


def test_miou_threshold_is_inclusive():
    assert metric_miou([0.5], [1.0], thresholds=(0.5,)) == 1.0


@given(pair())
def test_metrics_permutation_invariant(pg):
    pred, gt = pg
    perm = np.random.default_rng(7).permutation(len(pred))
    for fn in (metric_auc, metric_miou, metric_sim, metric_mae):
        a, b = fn(pred, gt), fn(pred[perm], gt[perm])
        assert (a is None and b is None) or a == pytest.approx(b, abs=1e-12)


@given(pair(64))
def test_auc_monotone_invariance(pg):
    pred, gt = pg
    base = metric_auc(pred, gt)
    for f in (lambda x: x ** 3, lambda x: 1 / (1 + np.exp(-8 * (x - 0.5)))):
        assert metric_auc(f(pred), gt) == base
