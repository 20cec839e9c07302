import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eon3d.detector import Detector, DetectorConfig
from eon3d.errors import InvalidArgumentError
from eon3d.evalkit import (
    average_precision,
    detection_metrics,
    equivariance_probe,
    evaluate,
    match_detections,
    orientation_accuracy,
    write_report,
)
from eon3d.geometry import OrientedBox
from eon3d.scenegen import SceneGenConfig, generate_isolated_scene, generate_scene


def brute_force_ap(flags, scores, num_gt):
    """Enumerate every prefix of the ranked list; interpolate with the best later precision."""
    if num_gt == 0:
        return 1.0 if len(flags) == 0 else 0.0
    ranked = [f for _, _, f in sorted(zip([-s for s in scores], range(len(flags)), flags))]
    prefixes = []
    for k in range(1, len(ranked) + 1):
        tp = sum(ranked[:k])
        prefixes.append((Fraction(tp, num_gt), Fraction(tp, k)))
    area, prev_recall = Fraction(0), Fraction(0)
    for recall, _ in prefixes:
        if recall > prev_recall:
            best = max(p for r, p in prefixes if r >= recall)
            area += (recall - prev_recall) * best
            prev_recall = recall
    return float(area)


def test_ap_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(0, 15))
        flags = rng.random(n) < 0.5
        scores = rng.integers(0, 5, size=n) / 4.0  # plenty of ties
        num_gt = int(flags.sum() + rng.integers(0, 3))
        assert average_precision(flags, scores, num_gt) == brute_force_ap(flags.tolist(), scores.tolist(), num_gt)


def test_ap_examples():
    assert average_precision([True, True], [0.9, 0.8], 2) == 1.0
    assert average_precision([], [], 3) == 0.0
    assert average_precision([True, False, True], [0.9, 0.8, 0.7], 2) == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision([], [], 0) == 1.0
    assert average_precision([False], [0.3], 0) == 0.0


@given(st.lists(st.tuples(st.booleans(), st.floats(0, 1)), max_size=20), st.integers(0, 5))
@settings(max_examples=200, deadline=None)
def test_ap_in_unit_interval(pairs, extra):
    flags = [f for f, _ in pairs]
    ap = average_precision(flags, [s for _, s in pairs], sum(flags) + extra)
    assert 0.0 <= ap <= 1.0


def unit_box(x, score=1.0, cls=0, yaw=0.0):
    return OrientedBox(np.array([x, 0.0, 0.5]), np.ones(3), yaw, cls, score)


def test_match_examples():
    gt = [unit_box(0)]
    _, tp, matched = match_detections([unit_box(0, 0.9)], gt, 0.25)
    assert tp.tolist() == [True] and matched.tolist() == [0]
    order, tp, _ = match_detections([unit_box(0, 0.6), unit_box(0, 0.9)], gt, 0.25)
    assert order.tolist() == [1, 0] and tp.tolist() == [True, False]
    # shift giving IoU 0.3: overlap a, union 2 - a -> a = 0.6 / 1.3
    a = 0.6 / 1.3
    _, tp, _ = match_detections([unit_box(1 - a)], gt, 0.5)
    assert tp.tolist() == [False]
    _, tp, _ = match_detections([unit_box(1 - a)], gt, 0.25)
    assert tp.tolist() == [True]


def test_orientation_accuracy():
    assert orientation_accuracy([], 4) is None
    pairs = [(unit_box(0, yaw=0.1), unit_box(0, yaw=0.0)), (unit_box(0, yaw=1.6), unit_box(0, yaw=0.0))]
    assert orientation_accuracy(pairs, 4) == 0.5


def jittered(scene, rng, n_extra=3):
    dets = []
    for b in scene.gt_boxes:
        dets.append(b.with_(center=b.center + rng.normal(0, 0.15, 3), score=float(rng.random())))
    for _ in range(n_extra):
        dets.append(unit_box(float(rng.uniform(-2, 2)), float(rng.random()), int(rng.integers(0, 3))))
    return dets


@pytest.fixture(scope="module")
def scenes():
    return [generate_scene(SceneGenConfig(), s) for s in range(6)]


CLASSES = list(SceneGenConfig().classes)


def test_metrics_ignore_detection_order(scenes):
    rng = np.random.default_rng(1)
    dets = [jittered(s, rng) for s in scenes]
    a = detection_metrics(dets, scenes, CLASSES, (0.25, 0.5), 4)
    shuffled = [[d[i] for i in rng.permutation(len(d))] for d in dets]
    b = detection_metrics(shuffled, scenes, CLASSES, (0.25, 0.5), 4)
    assert a["ap"] == b["ap"] and a["map"] == b["map"]


def test_ap_monotone_in_threshold(scenes):
    rng = np.random.default_rng(2)
    dets = [jittered(s, rng) for s in scenes]
    thresholds = [0.1, 0.25, 0.4, 0.5, 0.7, 0.9]
    m = detection_metrics(dets, scenes, CLASSES, thresholds, 4)
    for name in CLASSES:
        aps = [m["ap"][f"{t:g}"][name] for t in thresholds]
        assert all(x >= y for x, y in zip(aps, aps[1:])), aps


def test_empty_split_report():
    m = detection_metrics([], [], CLASSES, (0.25,), 4)
    assert m["ap"]["0.25"] == {c: 1.0 for c in CLASSES}
    assert m["counts"]["num_scenes"] == 0


# -- probe ------------------------------------------------------------------


@pytest.fixture(scope="module")
def grid_scene():
    return generate_isolated_scene(SceneGenConfig(yaw_mode="grid", object_count=(2, 2)), 3)


def test_probe_identity_row_is_zero(grid_scene):
    report = equivariance_probe(Detector(DetectorConfig(variant="ion")), grid_scene, 0)
    row = report.rows[0]
    assert row.g0 == 0 and row.orbit_residual == 0.0
    assert row.yaw_delta_error == 0.0 and row.size_drift == 0.0 and row.center_error == 0.0
    assert not report.asserted and report.passed


def test_probe_bounds_hold_for_oracle_eon(grid_scene):
    det = Detector(DetectorConfig(oracle_orientation=True, oracle_segmentation=True))
    report = equivariance_probe(det, grid_scene, 1)
    assert report.applicable and report.asserted
    assert report.passed, report.failures
    assert len(report.rows) == 4
    for row in report.rows:
        assert row.shift_correct_rate == 1.0 and row.object_regions > 0


def test_probe_reports_baseline_without_bounds(grid_scene):
    report = equivariance_probe(Detector(DetectorConfig(variant="baseline")), grid_scene, 0)
    assert len(report.rows) == 1 and not report.asserted


def test_probe_flags_crowded_object():
    scene = generate_scene(SceneGenConfig(yaw_mode="grid"), 0)
    report = equivariance_probe(Detector(DetectorConfig(oracle_orientation=True, oracle_segmentation=True)),
                                scene, 0)
    assert not report.applicable and not report.asserted


def test_probe_rejects_unknown_object(grid_scene):
    with pytest.raises(InvalidArgumentError):
        equivariance_probe(Detector(DetectorConfig()), grid_scene, 5)


# -- evaluate ---------------------------------------------------------------


def test_evaluate_is_deterministic(scenes, tmp_path):
    det = Detector(DetectorConfig(sa1_samples=64, num_seeds=24, num_regions=8))
    a = evaluate(det, scenes[:3], timing=False)
    b = evaluate(det, scenes[:3], timing=False)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert set(a["ap"]) == {"0.25", "0.5"}
    paths = write_report(a, tmp_path, [{"epoch": 0, "losses": {"total": 1.0}}])
    names = {p.name for p in paths}
    assert {"report.json", "report.csv", "loss.png", f"pr_{CLASSES[0]}_0.25.png"} <= names
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0] == "threshold,class,ap,num_gt,num_det" and len(rows) == 1 + 2 * (len(CLASSES) + 1)


def test_single_threshold_gives_one_table(scenes):
    det = Detector(DetectorConfig(sa1_samples=64, num_seeds=24, num_regions=8))
    report = evaluate(det, scenes[:2], thresholds=(0.25,), probe=False)
    assert list(report["ap"]) == ["0.25"] and list(report["map"]) == ["0.25"]
    assert report["cost"]["parameters"] == det.num_parameters()
    assert report["cost"]["median_forward_ms"] > 0
