import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qarcnn.metrics import (
    average_precision,
    iou,
    localization_accuracy,
    match_ranked,
    mean_average_precision,
    precision_at_k,
)


def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0
    assert iou((0, 0, 10, 10), (5, 5, 15, 15)) == pytest.approx(25 / 175, abs=1e-12)


boxes = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 50), st.floats(0.1, 50)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == pytest.approx(iou(b, a))
    assert 0.0 <= v <= 1.0 + 1e-12


def test_localization_examples():
    gts = [(0, 0, 10, 10)] * 3
    assert localization_accuracy(gts, gts, 0.9) == 1.0
    assert localization_accuracy([(20, 20, 30, 30)] * 3, gts, 0.5) == 0.0
    # IoU 0.6, 0.55, 0.4 with boxes sharing y-extent: width w -> IoU w/10 for x1=0
    preds = [(0, 0, 6, 10), (0, 0, 5.5, 10), (0, 0, 4, 10)]
    assert localization_accuracy(preds, gts, 0.5) == pytest.approx(2 / 3)


def _ranked(flags):
    """Ranked list with one gt per TP at matching boxes, FPs elsewhere."""
    ranked, gt = [], {}
    for i, tp in enumerate(flags):
        box = (0, 0, 10, 10) if tp else (50, 50, 60, 60)
        ranked.append((i, 0, box))
        if tp:
            gt[i] = [(0, 0, 10, 10)]
    return ranked, gt


def test_average_precision_examples():
    ranked, gt = _ranked([True, False, True])
    assert average_precision(ranked, gt) == pytest.approx((1 + 2 / 3) / 2, abs=1e-9)
    ranked, gt = _ranked([True, True, False, False])
    assert average_precision(ranked, gt) == 1.0
    ranked, _ = _ranked([False, False])
    assert average_precision(ranked, {0: [(0, 0, 10, 10)]}) == 0.0


def test_unretrieved_positives_lower_ap():
    ranked, gt = _ranked([True])
    gt[99] = [(0, 0, 10, 10)]
    assert average_precision(ranked, gt) == pytest.approx(0.5)


def test_duplicate_detections_are_false_positives():
    gt = {0: [(0, 0, 10, 10)]}
    ranked = [(0, 0, (0, 0, 10, 10)), (0, 1, (0, 0, 10, 10))]
    assert list(match_ranked(ranked, gt)) == [True, False]


def test_precision_at_k_examples():
    ranked, gt = _ranked([True] * 10)
    assert precision_at_k(ranked, gt, 10) == 1.0
    ranked, gt = _ranked([False] * 10)
    assert precision_at_k(ranked, gt, 10) == 0.0
    ranked, gt = _ranked([True] * 7 + [False] * 3)
    assert precision_at_k(ranked, gt, 10) == pytest.approx(0.7)
    # shorter list still divides by k
    ranked, gt = _ranked([True] * 5)
    assert precision_at_k(ranked, gt, 10) == pytest.approx(0.5)


def test_map_skips_queries_without_positives():
    assert mean_average_precision({"a": 0.5, "b": 1.0, "c": None}) == pytest.approx(0.75)


def test_ap_is_order_sensitive(rng):
    flags = rng.random(50) < 0.3
    ranked, gt = _ranked(list(flags))
    best = sorted(ranked, key=lambda r: r[2] != (0, 0, 10, 10))
    assert average_precision(best, gt) == 1.0
    assert average_precision(ranked, gt) <= 1.0
    assert np.sum(match_ranked(ranked, gt)) == flags.sum()
