"""Dataset-level evaluation and report files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..scenegen import SceneGenConfig, generate_isolated_scene
from .metrics import average_precision, match_detections, orientation_accuracy
from .probe import equivariance_probe

DEFAULT_THRESHOLDS = (0.25, 0.5)


def threshold_key(thr: float) -> str:
    return f"{thr:g}"


def pr_curve(flags, scores, num_gt: int):
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    flags = np.asarray(flags, dtype=bool)[order]
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1) if len(flags) else np.zeros(0)
    recall = tp / num_gt if num_gt else np.zeros(len(flags))
    return precision.tolist(), recall.tolist()


def detection_metrics(detections: list, scenes: list, classes, thresholds, group_order: int) -> dict:
    """AP per class and threshold, mAP, orientation accuracy and counts.

    ``detections[i]`` holds the boxes predicted for ``scenes[i]``; their
    order does not matter.
    """
    out = {"ap": {}, "map": {}, "orientation_accuracy": {}, "pr": {}}
    num_gt = {name: 0 for name in classes}
    num_det = {name: 0 for name in classes}
    for dets, scene in zip(detections, scenes):
        for b in scene.gt_boxes:
            num_gt[classes[b.class_id]] += 1
        for d in dets:
            num_det[classes[d.class_id]] += 1
    for thr in thresholds:
        key = threshold_key(thr)
        aps, curves, pairs = {}, {}, []
        for c, name in enumerate(classes):
            flags, scores = [], []
            for dets, scene in zip(detections, scenes):
                d = [b for b in dets if b.class_id == c]
                g = [b for b in scene.gt_boxes if b.class_id == c]
                order, tp, matched = match_detections(d, g, thr)
                flags.extend(tp.tolist())
                scores.extend(d[i].score for i in order)
                pairs.extend((d[order[r]], g[matched[r]]) for r in range(len(order)) if matched[r] >= 0)
            aps[name] = average_precision(flags, scores, num_gt[name])
            p, r = pr_curve(flags, scores, num_gt[name])
            curves[name] = {"precision": p, "recall": r}
        out["ap"][key] = aps
        out["map"][key] = float(np.mean(list(aps.values()))) if aps else 0.0
        out["orientation_accuracy"][key] = orientation_accuracy(pairs, group_order)
        out["pr"][key] = curves
    out["counts"] = {"num_gt": num_gt, "num_det": num_det, "num_scenes": len(scenes)}
    return out


def probe_summary(report) -> dict:
    def worst(values, fn):
        values = [v for v in values if v is not None]
        return fn(values) if values else None

    rows = report.rows
    return {
        "applicable": report.applicable,
        "asserted": report.asserted,
        "passed": report.passed,
        "max_orbit_residual": worst([r.orbit_residual for r in rows], max),
        "min_shift_correct_rate": worst([r.shift_correct_rate for r in rows], min),
        "max_yaw_delta_error": worst([r.yaw_delta_error for r in rows], max),
        "max_size_drift": worst([r.size_drift for r in rows], max),
        "max_static_center_drift": worst([r.static_center_drift for r in rows], max),
    }


def evaluate(detector, scenes: list, thresholds=DEFAULT_THRESHOLDS, timing: bool = True,
             probe: bool = True) -> dict:
    """Full evaluation report of ``detector`` on ``scenes``."""
    cfg = detector.cfg
    thresholds = sorted(float(t) for t in thresholds)
    detections = [detector.detect(s) for s in scenes]
    report = {"variant": cfg.variant, "group_order": detector.group.order,
              "oracle": bool(cfg.oracle_orientation or cfg.oracle_segmentation),
              "thresholds": thresholds, "classes": list(cfg.classes)}
    report.update(detection_metrics(detections, scenes, list(cfg.classes), thresholds, cfg.group_order))
    if probe:
        gen = SceneGenConfig(group_order=cfg.group_order, classes=cfg.classes, yaw_mode="grid",
                             object_count=(2, 2))
        report["equivariance"] = probe_summary(
            equivariance_probe(detector, generate_isolated_scene(gen, 0), 0))
    cost = {"parameters": detector.num_parameters()}
    if timing:
        cost["median_forward_ms"] = 1000.0 * detector.forward_time(scenes[0]) if scenes else None
    report["cost"] = cost
    return report


def write_report(report: dict, out_dir, train_log: list | None = None) -> list:
    """Write report.json, report.csv and the plots; return the written paths."""
    from .plots import plot_losses, plot_pr

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "report.json", out_dir / "report.csv"]
    paths[0].write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "class", "ap", "num_gt", "num_det"])
        for key, aps in report["ap"].items():
            for name, ap in aps.items():
                w.writerow([key, name, f"{ap:.6f}", report["counts"]["num_gt"][name],
                            report["counts"]["num_det"][name]])
            w.writerow([key, "mAP", f"{report['map'][key]:.6f}", "", ""])
    for key, curves in report["pr"].items():
        for name, curve in curves.items():
            path = out_dir / f"pr_{name}_{key}.png"
            plot_pr(curve, f"{name} @ IoU {key}  AP={report['ap'][key][name]:.3f}", path)
            paths.append(path)
    path = out_dir / "loss.png"
    plot_losses(train_log or [], path)
    paths.append(path)
    return paths
