import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svdiscover.metrics import (
    MetricError,
    accuracy,
    cluster_majority,
    discovery_rates,
    evaluate,
    fos_fus,
    match_objects,
)


def split_fixture():
    gt = np.ones(100, dtype=int)
    pred = np.r_[np.full(80, 1), np.full(15, 2), np.zeros(5, int)]
    return pred, gt


class TestFosFus:
    def test_hand_computed_split(self):
        f_os, f_us = fos_fus(*split_fixture())
        assert f_os == pytest.approx(0.20, abs=1e-12)
        assert f_us == pytest.approx(0.15, abs=1e-12)

    def test_perfect(self):
        gt = np.r_[np.zeros(10, int), np.full(30, 1), np.full(20, 2)]
        assert fos_fus(gt * 3, gt) == (0.0, 0.0)

    def test_all_unassigned(self):
        gt = np.r_[np.zeros(10, int), np.full(30, 1)]
        assert fos_fus(np.zeros_like(gt), gt) == (1.0, 0.0)

    def test_background_points_ignored(self):
        gt = np.r_[np.zeros(50, int), np.full(50, 1)]
        pred = np.r_[np.full(50, 7), np.full(50, 1)]
        assert fos_fus(pred, gt) == (0.0, 0.0)

    def test_no_objects(self):
        with pytest.raises(MetricError):
            fos_fus(np.zeros(4, int), np.zeros(4, int))


class TestAccuracy:
    def test_threshold_is_strict(self):
        gt = np.r_[np.full(10, 1), np.zeros(90, int)]
        pred = np.r_[np.full(8, 1), np.zeros(92, int)]
        # IoU exactly 0.8 does not count
        assert accuracy(pred, gt, tau=0.8)[0] == 0.0
        assert accuracy(pred, gt, tau=0.79)[0] == 1.0

    def test_conventions_differ(self):
        gt = np.r_[np.full(10, 1), np.zeros(10, int)]
        pred = np.r_[np.full(10, 1), np.full(10, 1)]  # swallows the background too
        assert accuracy(pred, gt, convention="recall")[0] == 1.0
        assert accuracy(pred, gt, convention="iou")[0] == 0.0

    def test_one_to_one(self):
        # one cluster covering two objects can be matched to only one of them
        gt = np.r_[np.full(10, 1), np.full(10, 2)]
        pred = np.ones(20, int)
        m = match_objects(pred, gt, "recall")
        assert m[1].cluster_id == 1 and m[2].cluster_id is None

    def test_eval_ids_subset(self):
        gt = np.r_[np.full(10, 1), np.full(10, 2)]
        pred = np.r_[np.full(10, 5), np.zeros(10, int)]
        assert accuracy(pred, gt, eval_ids=[1])[0] == 1.0
        assert accuracy(pred, gt)[0] == 0.5
        with pytest.raises(MetricError):
            accuracy(pred, gt, eval_ids=[3])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            accuracy(np.zeros(3, int), np.ones(4, int))


class TestRates:
    def test_perfect(self):
        gt = np.r_[np.zeros(5, int), np.full(30, 1), np.full(20, 2)]
        assert discovery_rates(gt, gt) == (0.0, 0.0, 1.0, 0.0)

    def test_equal_split(self):
        gt = np.ones(100, int)
        pred = np.r_[np.full(50, 1), np.full(50, 2)]
        assert discovery_rates(pred, gt) == (0.5, 0.0, 0.5, 0.0)

    def test_fused(self):
        gt = np.r_[np.full(60, 1), np.full(40, 2)]
        pred = np.ones(100, int)
        r_os, r_us, r_gs, r_ms = discovery_rates(pred, gt)
        assert cluster_majority(pred, gt) == {1: 1}
        assert r_gs == pytest.approx(0.6) and r_us == pytest.approx(0.4) and r_ms == 0.0

    def test_uncovered(self):
        pred, gt = split_fixture()
        r_os, r_us, r_gs, r_ms = discovery_rates(pred, gt)
        assert (r_gs, r_os, r_ms) == pytest.approx((0.80, 0.15, 0.05))


@st.composite
def labelings(draw):
    n = draw(st.integers(1, 120))
    gt = np.array(draw(st.lists(st.integers(0, 4), min_size=n, max_size=n)))
    if not (gt > 0).any():
        gt[0] = 1
    pred = np.array(draw(st.lists(st.integers(0, 5), min_size=n, max_size=n)))
    return pred, gt


@settings(max_examples=50, deadline=None)
@given(labelings())
def test_rates_partition_object_points(pg):
    """Each object point lands in exactly one of good, over, miss; counted directly."""
    pred, gt = pg
    r_os, r_us, r_gs, r_ms = discovery_rates(pred, gt)
    n_all = (gt > 0).sum()
    assert r_gs + r_os + r_ms == pytest.approx(1.0, abs=1e-12)
    assert r_ms == pytest.approx(((gt > 0) & (pred == 0)).sum() / n_all, abs=1e-12)
    # independent recount of the good points
    majority = {}
    for c in np.unique(pred[(pred > 0) & (gt > 0)]):
        objs, counts = np.unique(gt[(pred == c) & (gt > 0)], return_counts=True)
        majority[c] = objs[counts.argmax()]
    good = 0
    for g in np.unique(gt[gt > 0]):
        own = [c for c, m in majority.items() if m == g]
        if own:
            good += max(((pred == c) & (gt == g)).sum() for c in own)
    assert r_gs == pytest.approx(good / n_all, abs=1e-12)
    f_os, f_us = fos_fus(pred, gt)
    assert 0 <= f_os <= 1 and 0 <= f_us <= 1


def test_report_csv_and_table():
    pred, gt = split_fixture()
    rep = evaluate(pred, gt)
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("accuracy,accuracy_recall,f_os,f_us")
    assert "f_os" in rep.table() and "80.00%" in rep.table()
    assert rep.n_gt_objects == 1 and rep.n_pred_objects == 2
