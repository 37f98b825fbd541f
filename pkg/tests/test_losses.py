import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from binloc import nn
from binloc.geometry import Doa, SectorGrid, encode_targets
from binloc.losses import (
    LossWeights,
    MetricAccumulator,
    bce,
    cell_average,
    dae,
    detection_metrics,
    evaluate,
    format_csv,
    format_table,
    masked_mae,
    total_loss,
)
from binloc.nn import Parameter, Tensor

G = SectorGrid()


def test_bce_values():
    assert bce(0.5, 1).item() == pytest.approx(math.log(2))
    assert bce(1 - 1e-7, 1).item() == pytest.approx(1e-7, rel=1e-3)
    assert bce(0.9, 0).item() == pytest.approx(-math.log(0.1))
    assert np.isfinite(bce(0.0, 1).item()) and bce(0.0, 1).item() == pytest.approx(-math.log(1e-7))


@given(st.floats(0, 1), st.sampled_from([0.0, 1.0]))
def test_bce_nonnegative(p, y):
    assert bce(p, y).item() >= 0


def test_masked_mae_examples():
    z = np.zeros((2, 8, 3))
    per, total = masked_mae(np.ones_like(z), z, z)
    assert total.item() == 0 and not per.data.any()
    pred, target, mask = z.copy(), z.copy(), z.copy()
    pred[1, 4, 2], target[1, 4, 2], mask[1, 4, 2] = 0.7, 0.5, 1
    assert masked_mae(pred, target, mask)[1].item() == pytest.approx(0.2)


@given(st.integers(0, 2**31))
def test_masked_entries_do_not_matter(seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.random((4, 8, 3)), rng.random((4, 8, 3))
    mask = (rng.random((4, 8, 3)) < 0.2).astype(float)
    a = masked_mae(pred, target, mask)[1].item()
    pred2 = np.where(mask > 0, pred, rng.random(pred.shape))
    assert masked_mae(pred2, target, mask)[1].item() == a


def _batch(seed, b=3):
    rng = np.random.default_rng(seed)
    targets = []
    for _ in range(b):
        az = rng.choice(np.arange(0, 360, 45), size=2, replace=False) + 10
        targets.append(encode_targets(G, [Doa(a, rng.uniform(-70, 70)) for a in az]).to_array())
    return np.stack(targets), rng.uniform(0.05, 0.95, (b, 8, 10))


def test_total_loss_perfect_and_zero_weights():
    target, pred = _batch(0)
    sat = np.clip(target, 1e-7, 1 - 1e-7)
    assert total_loss(Tensor(sat), target).total.item() < 24 * 1e-6
    assert total_loss(Tensor(pred), target, LossWeights(0, 0, 0, 0)).total.item() == 0


def test_total_loss_hand_expansion():
    target = encode_targets(G, [Doa(100, 40)]).to_array()[None]  # sector (2, 2)
    pred = np.full((1, 8, 10), 0.2)
    pred[0, 2, 0] = 0.7
    pred[0, 2, 7:10] = [0.6, 0.3, 0.8]
    w = LossWeights()
    u_azi, u_ele = 10 / 45, 15 / 50
    coarse = 7 * -math.log(0.8) - math.log(0.7)
    det = 22 * -math.log(0.8) - math.log(0.8) - math.log(0.6)
    expect = w.delta * coarse + w.alpha * det + w.beta * abs(0.3 - u_azi) + w.gamma * abs(0.8 - u_ele)
    lt = total_loss(Tensor(pred), target, w)
    assert lt.total.item() == pytest.approx(expect, rel=1e-12)
    assert lt.azi == pytest.approx(abs(0.3 - u_azi))


def test_total_loss_variants():
    target, pred = _batch(1)
    full = total_loss(Tensor(pred), target).total.item()
    nc = total_loss(Tensor(pred), target, variant="no_coarse")
    assert nc.coarse == 0 and nc.total.item() < full
    rl = total_loss(Tensor(pred), target, variant="regular_loss").total.item()
    assert rl != full
    with pytest.raises(nn.ShapeMismatch):
        total_loss(Tensor(pred[:, :, :7]), target)


def test_total_loss_gradient_masked():
    target, pred = _batch(2)
    p = Parameter(pred)
    total_loss(p, target).total.backward()
    inactive = target[..., 1::3] == 0
    assert not p.grad[..., 2::3][inactive].any() and not p.grad[..., 3::3][inactive].any()


def test_detection_metric_examples():
    target = np.zeros((1, 8, 10))
    assert detection_metrics(target, target) == (1.0, 0.0)
    target[0, 0, 1] = 1
    assert detection_metrics(target, target) == (1.0, 1.0)
    pred = target.copy()
    pred[0, 5, 4] = 0.9  # one false positive
    acc, f1 = detection_metrics(pred, target)
    assert acc == pytest.approx(23 / 24) and f1 == pytest.approx(2 / 3)


def test_dae_examples():
    # pred (10, 5) vs truth (12, 2) inside sector (0, 1)
    pred, target = np.zeros((1, 8, 10)), np.zeros((1, 8, 10))
    pred[0, 0, 4:7] = [0.9, 10 / 45, 30 / 50]
    target[0, 0, 4:7] = [1.0, 12 / 45, 27 / 50]
    az, el, comb, n = dae(pred, target)
    assert (az, el, comb, n) == pytest.approx((2.0, 3.0, 5.0, 1))
    az, el, comb, n = dae(np.zeros((1, 8, 10)), target)
    assert n == 0 and math.isnan(az) and math.isnan(comb)


@given(st.integers(0, 2**31), st.integers(1, 5))
def test_accumulator_merge(seed, parts):
    rng = np.random.default_rng(seed)
    pred = rng.random((parts * 3, 8, 10))
    target = (rng.random((parts * 3, 8, 10)) < 0.3).astype(float)
    whole = MetricAccumulator(G).add(pred, target)
    acc = [MetricAccumulator(G).add(pred[3 * k : 3 * k + 3], target[3 * k : 3 * k + 3]) for k in range(parts)]
    left = acc[0]
    for a in acc[1:]:
        left = left.merge(a)
    right = acc[-1]
    for a in reversed(acc[:-1]):
        right = a.merge(right)
    for m in (left, right):
        assert (m.tp, m.fp, m.fn, m.tn, m.n_valid) == (whole.tp, whole.fp, whole.fn, whole.tn, whole.n_valid)
        assert m.azi_err == pytest.approx(whole.azi_err)


def test_report_formatting():
    rng = np.random.default_rng(3)
    cells = {}
    for t in (1, 2, 3):
        for snr in (20.0, 10.0, 0.0):
            r = evaluate(rng.random((2, 8, 10)), (rng.random((2, 8, 10)) < 0.3).astype(float))
            cells[(t, snr)] = {"seen": r, "unseen": r}
    table = format_table(cells, ["seen", "unseen"])
    assert table.splitlines()[0].count("-talker") == 9
    rows = format_csv(cells, ["seen", "unseen"]).strip().splitlines()
    assert len(rows) == 1 + 9 + 1
    avg = cell_average([c["seen"] for c in cells.values()])
    assert avg.f1 == pytest.approx(np.mean([c["seen"].f1 for c in cells.values()]))
