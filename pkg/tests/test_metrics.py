import numpy as np
import pytest

from planttrack.errors import ValidationError
from planttrack.metrics import DetectionMetrics, match_detections, pck, tracking_error
from planttrack.peaks import Keypoint
from planttrack.tracker import Track


def kp(x, y, cls="leaf", score=1.0):
    return Keypoint(x, y, 14 * x + 7, 14 * y + 7, score, cls)


def test_perfect_detection():
    gt = [(1, 1, "leaf"), (5, 6, "fruit"), (9, 2, "leaf")]
    res = match_detections([kp(x, y, c) for x, y, c in gt], gt, 1)
    assert len(res.matches) == 3 and res.false_positives == [] and res.misses == []


def test_prediction_without_gt_is_false_positive():
    res = match_detections([kp(1, 1)], [], 1)
    assert res.false_positives == [0] and res.matches == []


def test_greedy_order_prefers_higher_score():
    preds = [kp(3, 3, score=0.7), kp(4, 3, score=0.9)]
    res = match_detections(preds, [(3, 3, "leaf")], 1)
    assert res.matches == [(1, 0)] and res.false_positives == [0]


def test_class_must_agree():
    res = match_detections([kp(2, 2, "fruit")], [(2, 2, "leaf")], 1)
    assert res.false_positives == [0] and res.misses == [0]


def test_negative_radius():
    with pytest.raises(ValidationError):
        match_detections([], [], -1)


def _random_case(rng):
    classes = ("leaf", "fruit")
    preds = [kp(*rng.integers(0, 8, 2), classes[rng.integers(2)], float(rng.uniform())) for _ in range(rng.integers(0, 8))]
    gt = [(int(x), int(y), classes[rng.integers(2)]) for x, y in rng.integers(0, 8, (rng.integers(0, 8), 2))]
    return preds, gt


def test_matching_conserves_counts():
    rng = np.random.default_rng(0)
    for _ in range(500):
        preds, gt = _random_case(rng)
        res = match_detections(preds, gt, int(rng.integers(0, 3)))
        assert len(res.matches) + len(res.misses) == len(gt)
        assert len(res.matches) + len(res.false_positives) == len(preds)
        assert len({g for _, g in res.matches}) == len(res.matches)


def test_pck_non_decreasing_in_radius():
    rng = np.random.default_rng(1)
    for _ in range(300):
        preds, gt = _random_case(rng)
        if not gt:
            continue
        values = [pck(len(match_detections(preds, gt, r).matches), len(gt)) for r in range(5)]
        assert values == sorted(values)


def test_pck_examples():
    assert pck(8, 10) == 0.8
    assert pck(0, 10) == 0.0
    assert pck(10, 10) == 1.0
    assert pck(0, 0) is None


def test_detection_metrics_aggregate():
    m = DetectionMetrics(1)
    m.add([kp(1, 1), kp(7, 7, "fruit")], [(1, 2, "leaf"), (4, 4, "fruit")])
    d = m.to_dict()
    assert (d["matches"], d["false_positives"], d["misses"]) == (1, 1, 1)
    assert d["precision"] == 0.5 and d["recall"] == 0.5
    assert d["per_class"]["leaf"]["pck"] == 1.0 and d["per_class"]["fruit"]["pck"] == 0.0


def test_tracking_error_examples():
    truth = [(t, 2 * t) for t in range(10)]
    perfect = Track(0, "leaf", 0, list(truth))
    m = tracking_error([perfect], {0: truth})
    assert (m.mean_error, m.survival) == (0.0, 1.0)
    off = Track(0, "leaf", 0, [(x + 3, y + 4) for x, y in truth])
    assert tracking_error([off], {0: truth}).mean_error == 5.0
    lost = [Track(i, "leaf", 0, [truth[0]] + [None] * 9) for i in range(3)]
    assert tracking_error(lost, {i: truth for i in range(3)}).survival == 0.0


def test_tracking_error_without_overlap():
    m = tracking_error([Track(0, "leaf", 0, [(1, 1)])], {})
    assert m.mean_error is None and m.survival is None
