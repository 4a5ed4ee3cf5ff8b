import numpy as np
import pytest

from conftest import mask_of
from voxpipe.domain.errors import GeometryMismatch
from voxpipe.evaluation.metrics import (
    ClsScores,
    MetricsReport,
    SegScores,
    cls_metrics,
    format_mean_std,
    inter_observer_dsc,
    mean_std,
    seg_metrics,
)


def test_seg_metrics_hand_counts():
    pred = np.zeros((1, 1, 10), dtype=np.uint8)
    gt = np.zeros((1, 1, 10), dtype=np.uint8)
    pred[0, 0, :6] = 1  # TP 4, FP 2
    gt[0, 0, 2:8] = 1  # FN 2
    s = seg_metrics(mask_of(pred), mask_of(gt))
    assert s.dsc == pytest.approx(8 / 12)
    assert s.precision == pytest.approx(4 / 6)
    assert s.sensitivity == pytest.approx(4 / 6)


def test_seg_metrics_edge_cases():
    empty = mask_of(np.zeros((2, 2, 2)))
    full = mask_of(np.ones((2, 2, 2)))
    assert seg_metrics(empty, empty) == SegScores(1.0, 1.0, 1.0)
    assert seg_metrics(full, full) == SegScores(1.0, 1.0, 1.0)
    assert seg_metrics(empty, full) == SegScores(0.0, 0.0, 0.0)
    with pytest.raises(GeometryMismatch):
        seg_metrics(empty, mask_of(np.zeros((2, 2, 3))))


def test_cls_metrics_perfect_separation():
    s = cls_metrics([0.9, 0.4, 0.6, 0.2], [1, 0, 1, 0])
    assert s.accuracy == 1.0 and s.f1 == 1.0
    assert s.undefined == ()


def test_cls_metrics_mixed():
    s = cls_metrics([0.9, 0.7, 0.2, 0.6, 0.1], [1, 0, 1, 1, 0])
    # TP 2, FP 1, FN 1, TN 1
    assert s.accuracy == pytest.approx(3 / 5)
    assert s.precision == pytest.approx(2 / 3)
    assert s.sensitivity == pytest.approx(2 / 3)
    assert s.specificity == pytest.approx(1 / 2)
    assert s.f1 == pytest.approx(2 / 3)


def test_cls_metrics_flags_zero_denominators():
    s = cls_metrics([0.1, 0.2], [0, 0])
    assert s.accuracy == 1.0
    assert s.precision == 0.0 and s.sensitivity == 0.0
    assert set(s.undefined) == {"precision", "sensitivity", "f1"}
    with pytest.raises(ValueError):
        cls_metrics([0.1], [0, 1])


def test_mean_std():
    assert mean_std([1.0, 2.0, 3.0]) == pytest.approx((2.0, 1.0))
    assert mean_std([4.0]) == (4.0, 0.0)
    assert format_mean_std([0.5, 0.7]) == "0.600 ± 0.141"


def test_inter_observer_dsc():
    a = mask_of(np.array([[[1, 1, 0, 0]]]))
    mean, std = inter_observer_dsc([a, a, a])
    assert (mean, std) == (1.0, 0.0)
    with pytest.raises(ValueError):
        inter_observer_dsc([a])


def test_report_case_and_fold_aggregation():
    rep = MetricsReport("seg")
    rep.add("a", SegScores(1.0, 1.0, 1.0), fold=0)
    rep.add("b", SegScores(0.5, 0.5, 0.5), fold=0)
    rep.add("c", SegScores(0.0, 0.0, 0.0), fold=1)
    assert rep.aggregate("case")["dsc"][0] == pytest.approx(0.5)
    # fold 平均: (0.75, 0.0)
    assert rep.aggregate("fold")["dsc"][0] == pytest.approx(0.375)
    assert rep.summary()["dsc"] == "0.500 ± 0.500"
    rows = rep.to_rows()
    assert rows[0] == ["id", "fold", "dsc", "precision", "sensitivity"]
    assert rows[1] == ["a", "0", "1.000000", "1.000000", "1.000000"]


def test_report_cls_rows():
    rep = MetricsReport("cls")
    rep.add("fold0", ClsScores(1.0, 1.0, 1.0, 1.0, 1.0))
    assert rep.to_rows()[0][2:] == ["accuracy", "precision", "sensitivity", "specificity", "f1"]
    assert rep.to_rows()[1][1] == ""
